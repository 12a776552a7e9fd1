#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffap/diffap.hpp"

namespace fs = std::filesystem;
using namespace diffap;

namespace {

fs::path output_dir() {
  const char* env = std::getenv("DIFFAP_OUTPUT_DIR");
  fs::path dir = env && *env ? fs::path(env) : fs::path("results");
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? ExperimentConfig::reference() : ExperimentConfig::load(path);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

Vec parse_vec(const std::string& s) {
  std::vector<double> v;
  std::string tok;
  std::istringstream in(s);
  while (std::getline(in, tok, ',')) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw InvalidArgument("cannot parse number '" + tok + "'");
    }
  }
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Rows of numbers; a first line that does not parse is taken as a header.
std::vector<Vec> read_points(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open '" + path + "'");
  std::vector<Vec> pts;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      pts.push_back(parse_vec(line));
    } catch (const InvalidArgument&) {
      if (!first) throw;
    }
    first = false;
  }
  return pts;
}

void write_vec(std::ostream& o, const Vec& v) {
  for (Eigen::Index j = 0; j < v.size(); ++j) o << (j ? "," : "") << detail::fmt_double(v[j]);
}

std::ostream& open_or_stdout(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  require(file.good(), "cannot write '" + path + "'");
  return file;
}

int print_checks(const std::vector<CheckResult>& checks) {
  int failed = 0;
  for (const auto& c : checks) {
    std::printf("%s %s: %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
    failed += c.pass ? 0 : 1;
  }
  return failed ? 1 : 0;
}

void print_reports(const std::vector<ExperimentReport>& reps) {
  for (const auto& r : reps) {
    std::printf("%-24s runs=%d standard=%.4f±%.4f", r.label.c_str(), r.runs(), r.standard_acc_mean,
                r.standard_acc_std);
    if (r.has_attack) std::printf(" robust=%.4f±%.4f", r.robust_acc_mean, r.robust_acc_std);
    if (r.aborted) std::printf(" ABORTED(%s)", r.aborted->c_str());
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based adversarial purification laboratory on Gaussian-mixture data"};
  app.require_subcommand(1);
  std::string config_path;
  bool check = false;
  app.add_option("--config", config_path, "experiment config (INI); default is the reference config");
  app.add_flag("--check", check, "exit nonzero if any assertion of the command fails");

  auto* sched = app.add_subcommand("schedule", "noise schedule tools");
  auto* sched_inspect = sched->add_subcommand("inspect", "CSV of t, beta_t, alpha_bar_t");
  sched->require_subcommand(1);
  std::string sched_out;
  sched_inspect->add_option("--output", sched_out, "output file (default stdout)");

  auto* score = app.add_subcommand("score", "score oracle tools");
  auto* score_eval = score->add_subcommand("eval", "score, noise prediction and log density at (x, t)");
  score->require_subcommand(1);
  std::string score_x;
  int score_t = 1;
  score_eval->add_option("--x", score_x, "comma-separated point")->required();
  score_eval->add_option("--t", score_t, "time step in [0, T]")->required();

  auto* sample = app.add_subcommand("sample", "unguided reverse trajectories");
  std::string sample_kind = "random", sample_x, sample_out;
  int sample_steps = 10, sample_forward = 1000, sample_runs = 4;
  std::uint64_t sample_seed = 0;
  sample->add_option("--kind", sample_kind, "ddim | ddpm | random | k=<v>");
  sample->add_option("--steps", sample_steps, "denoising steps M");
  sample->add_option("--forward", sample_forward, "top step t*");
  sample->add_option("--runs", sample_runs, "number of trajectories");
  sample->add_option("--seed", sample_seed, "base seed");
  sample->add_option("--x", sample_x, "start by forward-noising this point (default: pure noise)");
  sample->add_option("--output", sample_out, "output file (default stdout)");

  auto* pur = app.add_subcommand("purify", "purify points from a CSV file");
  std::string pur_in, pur_out;
  pur->add_option("--input", pur_in, "CSV, one point per row")->required();
  pur->add_option("--output", pur_out, "CSV output")->required();

  auto* att = app.add_subcommand("attack", "PGD+EOT against the configured defense, per sample");
  int att_limit = 0, att_run = 0;
  std::string att_out;
  att->add_option("--limit", att_limit, "attack only the first N dataset samples");
  att->add_option("--run", att_run, "run index used for seed derivation");
  att->add_option("--output", att_out, "CSV output (default $DIFFAP_OUTPUT_DIR/attack.csv)");

  auto* sweep = app.add_subcommand("sweep", "seeded experiment sweeps");
  sweep->require_subcommand(1);
  auto* sw_noise = sweep->add_subcommand("noise-rate", "robust/standard accuracy over k");
  auto* sw_fwd = sweep->add_subcommand("forward-steps", "accuracy over defense forward steps");
  bool sw_async_attacker = false, sw_blind = false;
  sw_fwd->add_flag("--fixed-attacker", sw_async_attacker, "keep the attacker's configured forward steps");
  sw_fwd->add_flag("--attack-without-guidance", sw_blind, "attacker differentiates an unguided chain");
  auto* sw_guid = sweep->add_subcommand("guidance", "standard accuracy per guidance method over forward steps");
  auto* sw_async = sweep->add_subcommand("async-attack", "defender fixed, attacker forward steps swept");
  int sw_async_ref = 100;
  sw_async->add_option("--async-step", sw_async_ref, "attacker step compared against the synchronous attack");

  auto* rep = app.add_subcommand("report", "summarize a sweep CSV");
  std::string rep_in;
  rep->add_option("--input", rep_in, "sweep CSV")->required();

  auto* cfgcmd = app.add_subcommand("config", "print the reference config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cfgcmd) {
      std::cout << kDefaultConfigText;
      return 0;
    }
    const ExperimentConfig cfg = load_config(config_path);

    if (*sched_inspect) {
      const auto s = cfg.build_schedule();
      std::ofstream f;
      auto& o = open_or_stdout(sched_out, f);
      o << "t,beta_t,alpha_bar_t\n";
      for (int t = 0; t <= s.T(); ++t)
        o << t << ',' << (t == 0 ? std::string("") : detail::fmt_double(s.beta(t))) << ','
          << detail::fmt_double(s.alpha_bar(t)) << '\n';
      return 0;
    }

    if (*score_eval) {
      const auto oracle = cfg.build_oracle();
      const Vec x = parse_vec(score_x);
      const auto ev = oracle.evaluate(x, score_t);
      std::cout << "score,";
      write_vec(std::cout, ev.score);
      std::cout << "\n";
      if (score_t >= 1) {
        std::cout << "epsilon,";
        write_vec(std::cout, oracle.epsilon(x, score_t));
        std::cout << "\n";
      }
      std::cout << "log_density," << detail::fmt_double(ev.log_density) << "\n";
      return 0;
    }

    if (*sample) {
      const auto oracle = cfg.build_oracle();
      const auto& sch = oracle.schedule();
      const auto spec = parse_sampler(sample_kind);
      const auto sub = make_subsequence(sample_forward, sample_steps);
      std::ofstream f;
      auto& o = open_or_stdout(sample_out, f);
      o << "run,t";
      for (Eigen::Index j = 0; j < oracle.dim(); ++j) o << ",x" << j;
      o << "\n";
      for (int r = 0; r < sample_runs; ++r) {
        Rng rng(derive_seed(sample_seed, {static_cast<std::uint64_t>(r)}));
        Vec start = rng.normal_vec(oracle.dim());
        if (!sample_x.empty()) start = forward_noise(sch, parse_vec(sample_x), sub.top(), start);
        const auto res = run_reverse(oracle, sch, sub, spec, start, rng);
        for (const auto& p : res.trajectory.points) {
          o << r << ',' << p.t << ',';
          write_vec(o, p.x_t);
          o << "\n";
        }
      }
      return 0;
    }

    if (*pur) {
      const auto oracle = cfg.build_oracle();
      const auto pts = read_points(pur_in);
      require(!pts.empty(), "purify: no input points");
      const auto out = purify_batch(oracle, oracle.schedule(), cfg.defense, pts, cfg.defense.seed, {},
                                    cfg.sweep.threads);
      std::ofstream f(pur_out);
      require(f.good(), "cannot write '" + pur_out + "'");
      for (const auto& v : out) {
        write_vec(f, v);
        f << "\n";
      }
      return 0;
    }

    if (*att) {
      const Lab lab(cfg);
      const Pipeline pipeline(lab.oracle, cfg.defense);
      const std::size_t n = att_limit > 0 ? std::min<std::size_t>(att_limit, lab.data.x.size()) : lab.data.x.size();
      std::vector<AttackResult> res(n);
      parallel_for(
          n,
          [&](std::size_t i) {
            AttackConfig ac = cfg.attack;
            ac.seed = attack_stream_seed(cfg.attack.seed, att_run, i);
            res[i] = pgd_attack(pipeline, lab.head, lab.data.x[i], lab.data.y[i], ac);
          },
          cfg.sweep.threads);
      const auto rseed = run_seed(cfg.defense.seed, att_run);
      const fs::path path = att_out.empty() ? output_dir() / "attack.csv" : fs::path(att_out);
      std::ofstream o(path);
      require(o.good(), "cannot write '" + path.string() + "'");
      o << "index,label,clean_pred,adv_pred,purified_clean_pred,purified_adv_pred,loss_initial,loss_best,"
           "loss_final,evaluations,guidance_evaluations,slack\n";
      bool budget_ok = true;
      for (std::size_t i = 0; i < n; ++i) {
        Rng r1(purify_stream_seed(rseed, i)), r2(purify_stream_seed(rseed, i));
        const Vec pc = purify(lab.oracle, lab.oracle.schedule(), cfg.defense, lab.data.x[i], r1);
        const Vec pa = purify(lab.oracle, lab.oracle.schedule(), cfg.defense, res[i].x_adv, r2);
        const auto& tr = res[i].raw_losses;
        o << i << ',' << lab.data.y[i] << ',' << lab.head.predict(lab.data.x[i]) << ','
          << lab.head.predict(res[i].x_adv) << ',' << lab.head.predict(pc) << ',' << lab.head.predict(pa) << ','
          << (tr.empty() ? std::string("") : detail::fmt_double(tr.front())) << ','
          << (tr.empty() ? std::string("") : detail::fmt_double(res[i].best_loss)) << ','
          << (tr.empty() ? std::string("") : detail::fmt_double(tr.back())) << ',' << tr.size() << ','
          << res[i].guidance_evaluations << ',' << detail::fmt_double(res[i].slack) << '\n';
        const Vec& xa = res[i].x_adv;
        budget_ok = budget_ok && res[i].slack >= -1e-9 && xa.minCoeff() >= 0.0 && xa.maxCoeff() <= 1.0;
      }
      std::printf("wrote %s (%zu samples)\n", path.string().c_str(), n);
      if (check) return print_checks({{"budget and box", budget_ok, "all adversarial examples"}});
      return 0;
    }

    if (*sweep) {
      const Lab lab(cfg);
      std::vector<ExperimentReport> reps;
      std::vector<CheckResult> checks;
      std::string name;
      if (*sw_noise) {
        name = "noise_rate";
        reps = sweep_noise_rate(lab, cfg.sweep.noise_rates);
        if (cfg.attack_enabled) checks.push_back(check_noise_rate(reps));
        checks.push_back(check_flat_standard(reps));
      } else if (*sw_fwd) {
        name = "forward_steps";
        reps = sweep_forward_steps(lab, cfg.sweep.forward_steps, !sw_async_attacker, !sw_blind);
        if (cfg.defense.guidance.method == GuidanceMethod::MEDIATOR) checks.push_back(check_flat_standard(reps));
      } else if (*sw_guid) {
        name = "guidance";
        reps = sweep_guidance_methods(lab, cfg.sweep.guidance_methods, cfg.sweep.forward_steps);
        for (auto& c : check_guidance_shapes(reps, prior_guess_accuracy(lab.oracle.gmm()),
                                             cfg.sweep.dataset_size * cfg.sweep.runs))
          checks.push_back(c);
      } else if (*sw_async) {
        name = "async_attack";
        reps = sweep_async_attack(lab, cfg.sweep.async_samplers, cfg.sweep.attacker_forward_steps);
        for (auto& c : check_async(reps, sw_async_ref)) checks.push_back(c);
      }
      checks.insert(checks.begin(), check_aggregation(reps));
      const fs::path path = output_dir() / ("sweep_" + name + ".csv");
      emit_report(reps, path);
      print_reports(reps);
      std::printf("wrote %s\n", path.string().c_str());
      if (check) return print_checks(checks);
      return 0;
    }

    if (*rep) {
      std::ifstream in(rep_in);
      require(in.good(), "cannot open '" + rep_in + "'");
      std::string line;
      require(static_cast<bool>(std::getline(in, line)), "report: empty file");
      const auto header = split_csv_line(line);
      auto col = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        require(it != header.end(), "report: missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
      };
      const auto c_label = col("label"), c_std = col("standard_acc"), c_rob = col("robust_acc");
      std::vector<std::string> order;
      std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        require(f.size() == header.size(), "report: ragged row");
        if (!groups.count(f[c_label])) order.push_back(f[c_label]);
        auto& g = groups[f[c_label]];
        g.first.push_back(std::stod(f[c_std]));
        if (!f[c_rob].empty()) g.second.push_back(std::stod(f[c_rob]));
      }
      std::printf("label,runs,standard_mean,standard_std,robust_mean,robust_std\n");
      for (const auto& label : order) {
        const auto& [s, r] = groups[label];
        const auto [sm, ss] = mean_std(s);
        std::printf("%s,%zu,%.6f,%.6f", label.c_str(), s.size(), sm, ss);
        if (!r.empty()) {
          const auto [rm, rs] = mean_std(r);
          std::printf(",%.6f,%.6f\n", rm, rs);
        } else {
          std::printf(",,\n");
        }
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
