#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffap/attack.hpp"
#include "diffap/classifier.hpp"
#include "diffap/config.hpp"
#include "diffap/parallel.hpp"
#include "diffap/purifier.hpp"

namespace diffap {

inline constexpr const char* kReportNote =
    "Desk-scale Gaussian-mixture laboratory: trend claims are judged by sign and ordering on "
    "paired seeds, not by image-benchmark magnitudes.";

struct Dataset {
  std::vector<Vec> x;
  std::vector<int> y;
};

/// Fixed evaluation set: n mixture draws, clipped to the unit box.
inline Dataset draw_dataset(const GaussianMixtureModel& gmm, int n, std::uint64_t seed) {
  require(n >= 1, "draw_dataset: size must be >= 1");
  Rng rng(seed);
  Dataset ds;
  ds.x.reserve(static_cast<std::size_t>(n));
  ds.y.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto d = gmm.sample(rng);
    ds.x.push_back(clip_unit_box(d.x));
    ds.y.push_back(d.label);
  }
  return ds;
}

/// Accuracy of the classifier that always answers the most likely class.
inline double prior_guess_accuracy(const GaussianMixtureModel& gmm) {
  const auto p = gmm.class_priors();
  return *std::max_element(p.begin(), p.end());
}

struct RunRow {
  int run = 0;
  double standard_acc = 0.0;
  double robust_acc = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;  // defense stream base for this run
  double wall_ms = 0.0;
  double purify_ms = 0.0;
  double attack_ms = 0.0;
  int diverged = 0;  // purified outputs that blew up (clean + adversarial)
  long attack_guidance_evaluations = 0;
};

struct ExperimentReport {
  std::string label;
  std::vector<std::pair<std::string, std::string>> config;
  bool has_attack = false;
  std::vector<RunRow> rows;
  double standard_acc_mean = 0.0;
  double standard_acc_std = 0.0;
  double robust_acc_mean = std::numeric_limits<double>::quiet_NaN();
  double robust_acc_std = std::numeric_limits<double>::quiet_NaN();
  double clean_acc = 0.0;  // classifier on the unpurified dataset
  std::optional<std::string> aborted;

  int runs() const { return static_cast<int>(rows.size()); }

  std::string config_value(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) return v;
    return "";
  }
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline void aggregate(ExperimentReport& rep) {
  std::vector<double> s, r;
  for (const auto& row : rep.rows) {
    s.push_back(row.standard_acc);
    r.push_back(row.robust_acc);
  }
  std::tie(rep.standard_acc_mean, rep.standard_acc_std) = mean_std(s);
  if (rep.has_attack) std::tie(rep.robust_acc_mean, rep.robust_acc_std) = mean_std(r);
}

/// Base seed of run r's defense streams; sample i then uses
/// purify_stream_seed(run_seed, i), exactly as purify_batch does. The same
/// stream purifies the clean and the adversarial copy of a sample.
inline std::uint64_t run_seed(std::uint64_t defense_seed, int run) {
  return derive_seed(defense_seed, {static_cast<std::uint64_t>(run)});
}

inline std::uint64_t attack_stream_seed(std::uint64_t attack_seed, int run, std::size_t sample) {
  return derive_seed(attack_seed, {static_cast<std::uint64_t>(run), static_cast<std::uint64_t>(sample)});
}

struct EvalContext {
  const ScoreOracle& oracle;
  const ClassifierHead& head;
  const Dataset& data;
  unsigned threads = 0;
};

/// Standard and (if `attack` is set) robust accuracy over `runs` runs on a
/// fixed dataset. Each run uses fresh defense streams; sample i of run r
/// always sees the same defense and attack seeds, whatever else varies.
inline ExperimentReport evaluate(const EvalContext& ctx, const DefenseConfig& defense,
                                 const std::optional<AttackConfig>& attack, int runs,
                                 std::vector<std::pair<std::string, std::string>> config = {},
                                 std::string label = "") {
  require(runs >= 1, "evaluate: runs must be >= 1");
  require(!ctx.data.x.empty(), "evaluate: empty dataset");
  defense.validate(ctx.oracle.schedule());
  if (attack) attack->validate();
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };

  ExperimentReport rep;
  rep.label = std::move(label);
  rep.config = std::move(config);
  rep.has_attack = attack.has_value();
  rep.clean_acc = accuracy(ctx.head, ctx.data.x, ctx.data.y);
  const std::size_t n = ctx.data.x.size();
  const Pipeline pipeline(ctx.oracle, defense);

  for (int r = 0; r < runs; ++r) {
    try {
      RunRow row;
      row.run = r;
      row.seed = run_seed(defense.seed, r);
      const auto t_run = clock::now();

      std::vector<Vec> clean_out(n);
      auto t0 = clock::now();
      parallel_for(
          n,
          [&](std::size_t i) {
            Rng rng(purify_stream_seed(row.seed, i));
            clean_out[i] = purify(ctx.oracle, ctx.oracle.schedule(), defense, ctx.data.x[i], rng);
          },
          ctx.threads);
      row.purify_ms = ms_since(t0);
      row.standard_acc = accuracy(ctx.head, clean_out, ctx.data.y);
      for (const auto& v : clean_out) row.diverged += v.allFinite() ? 0 : 1;

      if (attack) {
        std::vector<Vec> adv(n);
        std::vector<long> guided(n, 0);
        t0 = clock::now();
        parallel_for(
            n,
            [&](std::size_t i) {
              AttackConfig ac = *attack;
              ac.seed = attack_stream_seed(attack->seed, r, i);
              auto res = pgd_attack(pipeline, ctx.head, ctx.data.x[i], ctx.data.y[i], ac);
              adv[i] = std::move(res.x_adv);
              guided[i] = res.guidance_evaluations;
            },
            ctx.threads);
        row.attack_ms = ms_since(t0);
        for (long g : guided) row.attack_guidance_evaluations += g;
        std::vector<Vec> adv_out(n);
        t0 = clock::now();
        parallel_for(
            n,
            [&](std::size_t i) {
              Rng rng(purify_stream_seed(row.seed, i));
              adv_out[i] = purify(ctx.oracle, ctx.oracle.schedule(), defense, adv[i], rng);
            },
            ctx.threads);
        row.purify_ms += ms_since(t0);
        row.robust_acc = accuracy(ctx.head, adv_out, ctx.data.y);
        for (const auto& v : adv_out) row.diverged += v.allFinite() ? 0 : 1;
      }
      row.wall_ms = ms_since(t_run);
      rep.rows.push_back(row);
    } catch (const std::exception& e) {
      rep.aborted = "run " + std::to_string(r) + ": " + e.what();
      break;
    }
  }
  aggregate(rep);
  return rep;
}

/// Shared pieces of every sweep: built once from the experiment config.
struct Lab {
  ExperimentConfig cfg;
  ScoreOracle oracle;
  ClassifierHead head;
  Dataset data;

  explicit Lab(ExperimentConfig c)
      : cfg(std::move(c)),
        oracle(cfg.build_oracle()),
        head(cfg.build_head()),
        data(draw_dataset(cfg.build_mixture(), cfg.sweep.dataset_size, cfg.sweep.dataset_seed)) {}

  EvalContext context() const { return {oracle, head, data, cfg.sweep.threads}; }

  std::vector<std::pair<std::string, std::string>> snapshot(
      const DefenseConfig& d, const std::optional<AttackConfig>& a,
      std::vector<std::pair<std::string, std::string>> grid) const {
    ExperimentConfig c = cfg;
    c.defense = d;
    c.attack_enabled = a.has_value();
    if (a) c.attack = *a;
    auto kv = c.flatten();
    for (auto& g : grid) kv.insert(kv.begin(), std::move(g));
    return kv;
  }

  ExperimentReport run(const DefenseConfig& d, const std::optional<AttackConfig>& a, int runs,
                       std::vector<std::pair<std::string, std::string>> grid, std::string label) const {
    return evaluate(context(), d, a, runs, snapshot(d, a, std::move(grid)), std::move(label));
  }

  std::optional<AttackConfig> attack() const {
    return cfg.attack_enabled ? std::optional(cfg.attack) : std::nullopt;
  }
};

inline std::string grid_value(double v) { return detail::fmt_double(v); }

/// One report per fresh-noise proportion k (CUSTOM sampler), paired seeds.
inline std::vector<ExperimentReport> sweep_noise_rate(const Lab& lab, const std::vector<double>& k_grid) {
  require(!k_grid.empty(), "sweep_noise_rate: empty grid");
  std::vector<ExperimentReport> out;
  for (double k : k_grid) {
    DefenseConfig d = lab.cfg.defense;
    d.sampler = SamplerSpec::custom(k);
    d.sampler.validate();
    out.push_back(lab.run(d, lab.attack(), lab.cfg.sweep.runs, {{"sweep.k", grid_value(k)}},
                          "k=" + grid_value(k)));
  }
  return out;
}

/// Defense forward steps swept over the grid; the attacker follows them when
/// synchronous. M is capped at t*.
inline std::vector<ExperimentReport> sweep_forward_steps(const Lab& lab, const std::vector<int>& step_grid,
                                                         bool attacker_sync, bool attacker_knows_guidance) {
  require(!step_grid.empty(), "sweep_forward_steps: empty grid");
  std::vector<ExperimentReport> out;
  for (int t : step_grid) {
    require(t >= 1 && t <= lab.oracle.schedule().T(), "sweep_forward_steps: step outside [1, T]");
    DefenseConfig d = lab.cfg.defense;
    d.forward_steps = t;
    d.denoising_steps = std::min(d.denoising_steps, t);
    auto a = lab.attack();
    if (a) {
      a->attacker_knows_guidance = attacker_knows_guidance;
      if (attacker_sync) {
        a->attacker_forward_steps.reset();
        a->attacker_denoising_steps.reset();
      }
    }
    out.push_back(lab.run(d, a, lab.cfg.sweep.runs, {{"sweep.forward_steps", std::to_string(t)}},
                          "t*=" + std::to_string(t)));
  }
  return out;
}

/// Standard accuracy per guidance method over defense forward steps.
inline std::vector<ExperimentReport> sweep_guidance_methods(const Lab& lab,
                                                            const std::vector<GuidanceMethod>& methods,
                                                            const std::vector<int>& step_grid) {
  require(!methods.empty() && !step_grid.empty(), "sweep_guidance_methods: empty grid");
  std::vector<ExperimentReport> out;
  for (auto m : methods) {
    for (int t : step_grid) {
      require(t >= 1 && t <= lab.oracle.schedule().T(), "sweep_guidance_methods: step outside [1, T]");
      DefenseConfig d = lab.cfg.defense;
      d.forward_steps = t;
      d.denoising_steps = std::min(d.denoising_steps, t);
      if (m == GuidanceMethod::NONE) {
        d.guidance = GuidanceSpec::none();
      } else {
        d.guidance.method = m;
      }
      out.push_back(lab.run(d, std::nullopt, lab.cfg.sweep.runs,
                            {{"sweep.forward_steps", std::to_string(t)}, {"sweep.guidance", to_string(m)}},
                            to_string(m) + "@" + std::to_string(t)));
    }
  }
  return out;
}

/// Defender fixed at its configured forward steps; for each sampler, one
/// synchronous baseline followed by one report per attacker forward step.
/// The configured attacker_denoising_steps apply to the asynchronous points
/// only.
inline std::vector<ExperimentReport> sweep_async_attack(const Lab& lab,
                                                        const std::vector<SamplerSpec>& samplers,
                                                        const std::vector<int>& attacker_grid) {
  require(!samplers.empty() && !attacker_grid.empty(), "sweep_async_attack: empty grid");
  require(lab.cfg.attack_enabled, "sweep_async_attack: attack disabled in config");
  std::vector<ExperimentReport> out;
  for (const auto& s : samplers) {
    DefenseConfig d = lab.cfg.defense;
    d.sampler = s;
    AttackConfig a = lab.cfg.attack;
    const auto async_M = a.attacker_denoising_steps;
    a.attacker_forward_steps.reset();
    a.attacker_denoising_steps.reset();
    out.push_back(lab.run(d, a, lab.cfg.sweep.runs,
                          {{"sweep.attacker_forward_steps", "sync"}, {"sweep.sampler", to_string(s.kind)}},
                          to_string(s.kind) + "@sync"));
    for (int ta : attacker_grid) {
      a.attacker_forward_steps = ta;
      if (async_M) a.attacker_denoising_steps = std::min(*async_M, ta);
      out.push_back(lab.run(d, a, lab.cfg.sweep.runs,
                            {{"sweep.attacker_forward_steps", std::to_string(ta)},
                             {"sweep.sampler", to_string(s.kind)}},
                            to_string(s.kind) + "@" + std::to_string(ta)));
    }
  }
  return out;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "";
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

inline nlohmann::ordered_json json_number(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

}  // namespace detail

/// Column order: union of config keys in first-seen order.
inline std::vector<std::string> report_columns(const std::vector<ExperimentReport>& reports) {
  std::vector<std::string> keys;
  for (const auto& rep : reports)
    for (const auto& [k, v] : rep.config)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  return keys;
}

inline std::string report_csv(const std::vector<ExperimentReport>& reports) {
  const auto keys = report_columns(reports);
  std::ostringstream o;
  o << "label";
  for (const auto& k : keys) o << ',' << detail::csv_field(k);
  o << ",run,standard_acc,robust_acc,seed,wall_ms\n";
  for (const auto& rep : reports) {
    for (const auto& row : rep.rows) {
      o << detail::csv_field(rep.label);
      for (const auto& k : keys) o << ',' << detail::csv_field(rep.config_value(k));
      o << ',' << row.run << ',' << detail::fmt_double(row.standard_acc) << ','
        << (std::isfinite(row.robust_acc) ? detail::fmt_double(row.robust_acc) : "") << ',' << row.seed << ',' << detail::fixed(row.wall_ms, 3)
        << '\n';
    }
  }
  return o.str();
}

inline std::string report_json(const std::vector<ExperimentReport>& reports) {
  nlohmann::ordered_json root;
  root["note"] = kReportNote;
  auto& arr = root["reports"] = nlohmann::ordered_json::array();
  for (const auto& rep : reports) {
    nlohmann::ordered_json j;
    j["label"] = rep.label;
    nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
    for (const auto& [k, v] : rep.config) cfg[k] = v;
    j["config"] = cfg;
    j["runs"] = rep.runs();
    j["clean_acc"] = rep.clean_acc;
    j["standard_acc_mean"] = detail::json_number(rep.standard_acc_mean);
    j["standard_acc_std"] = detail::json_number(rep.standard_acc_std);
    j["robust_acc_mean"] = detail::json_number(rep.robust_acc_mean);
    j["robust_acc_std"] = detail::json_number(rep.robust_acc_std);
    double purify_ms = 0, attack_ms = 0;
    int diverged = 0;
    for (const auto& row : rep.rows) {
      purify_ms += row.purify_ms;
      attack_ms += row.attack_ms;
      diverged += row.diverged;
    }
    j["wall_ms"] = {{"purify", purify_ms}, {"attack", attack_ms}};
    j["diverged_outputs"] = diverged;
    if (rep.aborted) j["aborted"] = *rep.aborted;
    arr.push_back(std::move(j));
  }
  return root.dump(2) + "\n";
}

/// Writes `<path>` (CSV, one row per run per report) and the JSON summary
/// next to it with extension .json.
inline void emit_report(const std::vector<ExperimentReport>& reports, const std::filesystem::path& path) {
  require(!reports.empty(), "emit_report: no reports");
  auto json_path = path;
  json_path.replace_extension(".json");
  require(json_path != path, "emit_report: CSV path must not end in .json");
  const std::string csv = report_csv(reports);
  const std::string json = report_json(reports);
  for (const auto& [p, text] : {std::pair{path, csv}, std::pair{json_path, json}}) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("emit_report: cannot write '" + p.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("emit_report: write failed for '" + p.string() + "'");
  }
}

}  // namespace diffap
