#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "diffap/attack.hpp"
#include "diffap/classifier.hpp"
#include "diffap/mixture.hpp"
#include "diffap/purifier.hpp"
#include "diffap/schedule.hpp"
#include "diffap/score.hpp"

namespace diffap {

/// Reference configuration. configs/default.ini is a copy of this text.
inline constexpr const char* kDefaultConfigText = R"ini([schedule]
total_steps = 1000
beta_start = 0.0001
beta_end = 0.02

[mixture]
version = 1
dim = 8
weights = 0.25 0.25 0.25 0.25
labels = 0 1 2 3
stddev = 0.1 0.1 0.1 0.1
mean.0 = 0.2 0.2 0.2 0.2 0.2 0.2 0.2 0.2
mean.1 = 0.8 0.8 0.8 0.8 0.8 0.2 0.2 0.2
mean.2 = 0.2 0.2 0.2 0.8 0.8 0.8 0.8 0.8
mean.3 = 0.8 0.8 0.8 0.2 0.2 0.8 0.8 0.8
temperature = 1
score_error = 0
score_error_seed = 0

[defense]
forward_steps = 1000
denoising_steps = 10
sampler.kind = random
sampler.k = 1
guidance.method = mediator
guidance.R = 2
guidance.distance = mse
guidance.modulus_k = 2
seed = 20240

[attack]
enabled = 1
norm = linf
epsilon = 0.03137254901960784
iterations = 200
eot_samples = 5
step_size = 0.00784313725490196
attacker_forward_steps = 0
attacker_denoising_steps = 0
attacker_knows_guidance = 1
gradient_backend = analytic
restarts = 1
seed = 7

[sweep]
dataset_size = 512
dataset_seed = 1
runs = 5
threads = 0
noise_rates = 0 0.25 0.5 0.75 1
forward_steps = 50 100 200 300 500 700 1000
guidance_methods = none mediator gdmp dps
attacker_forward_steps = 50 100 200 500
async_samplers = random ddpm ddim
)ini";

struct ScheduleConfig {
  int total_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct MixtureConfig {
  int version = 1;
  int dim = 8;
  std::vector<double> weights;
  std::vector<int> labels;
  std::vector<double> stddev;
  std::vector<Vec> means;
  double temperature = 1.0;
  double score_error = 0.0;
  std::uint64_t score_error_seed = 0;
};

struct SweepConfig {
  int dataset_size = 512;
  std::uint64_t dataset_seed = 1;
  int runs = 5;
  unsigned threads = 0;
  std::vector<double> noise_rates;
  std::vector<int> forward_steps;
  std::vector<GuidanceMethod> guidance_methods;
  std::vector<int> attacker_forward_steps;
  std::vector<SamplerSpec> async_samplers;
};

namespace detail {

namespace pt = boost::property_tree;

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

template <class T>
T parse_scalar(const std::string& s, const std::string& key) {
  std::istringstream in(s);
  T v{};
  in >> v;
  require(!in.fail() && (in >> std::ws).eof(), "config: bad value '" + s + "' for " + key);
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& s, const std::string& key) {
  std::vector<T> out;
  for (const auto& tok : split_ws(s)) out.push_back(parse_scalar<T>(tok, key));
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw InvalidArgument("config: bad boolean '" + s + "' for " + key);
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    if constexpr (std::is_floating_point_v<T>) out += fmt_double(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(pt::ptree::path_type(section, '/'));
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(pt::ptree::path_type(key, '/'));
    if (!v) return std::nullopt;
    return *v;
  }

  template <class T>
  void get(const std::string& section, const std::string& key, T& out) const {
    if (auto v = raw(section, key)) out = parse_scalar<T>(*v, section + "." + key);
  }

  void get_bool(const std::string& section, const std::string& key, bool& out) const {
    if (auto v = raw(section, key)) out = parse_bool(*v, section + "." + key);
  }

  template <class T>
  void get_list(const std::string& section, const std::string& key, std::vector<T>& out) const {
    if (auto v = raw(section, key)) out = parse_list<T>(*v, section + "." + key);
  }

 private:
  const pt::ptree& tree_;
};

}  // namespace detail

/// Everything an experiment needs, parsed from one sectioned text file.
/// Keys absent from a file keep the reference values.
struct ExperimentConfig {
  ScheduleConfig schedule;
  MixtureConfig mixture;
  DefenseConfig defense;
  AttackConfig attack;
  bool attack_enabled = true;
  SweepConfig sweep;

  static ExperimentConfig parse(const std::string& text) { return parse_over(reference(), text); }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  static const ExperimentConfig& reference() {
    static const ExperimentConfig ref = parse_over(ExperimentConfig{}, kDefaultConfigText);
    return ref;
  }

  NoiseSchedule build_schedule() const {
    return build_linear_schedule(schedule.total_steps, schedule.beta_start, schedule.beta_end);
  }

  GaussianMixtureModel build_mixture() const {
    std::vector<double> var;
    for (double s : mixture.stddev) var.push_back(s * s);
    return GaussianMixtureModel(mixture.weights, mixture.means, var, mixture.labels);
  }

  ScoreOracle build_oracle() const {
    std::optional<ScoreErrorSpec> err;
    if (mixture.score_error > 0.0) err = ScoreErrorSpec{mixture.score_error, mixture.score_error_seed};
    return ScoreOracle(build_mixture(), build_schedule(), err);
  }

  ClassifierHead build_head() const { return ClassifierHead(build_mixture(), mixture.temperature); }

  /// Resolved key/value pairs in a fixed order, for report provenance.
  std::vector<std::pair<std::string, std::string>> flatten() const {
    using detail::fmt_double;
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("schedule.total_steps", std::to_string(schedule.total_steps));
    kv.emplace_back("schedule.beta_start", fmt_double(schedule.beta_start));
    kv.emplace_back("schedule.beta_end", fmt_double(schedule.beta_end));
    kv.emplace_back("mixture.version", std::to_string(mixture.version));
    kv.emplace_back("mixture.dim", std::to_string(mixture.dim));
    kv.emplace_back("mixture.weights", detail::join(mixture.weights));
    kv.emplace_back("mixture.labels", detail::join(mixture.labels));
    kv.emplace_back("mixture.stddev", detail::join(mixture.stddev));
    for (std::size_t i = 0; i < mixture.means.size(); ++i)
      kv.emplace_back("mixture.mean." + std::to_string(i),
                      detail::join(std::vector<double>(mixture.means[i].begin(), mixture.means[i].end())));
    kv.emplace_back("mixture.temperature", fmt_double(mixture.temperature));
    kv.emplace_back("mixture.score_error", fmt_double(mixture.score_error));
    kv.emplace_back("mixture.score_error_seed", std::to_string(mixture.score_error_seed));
    append_defense(kv, defense);
    kv.emplace_back("attack.enabled", attack_enabled ? "1" : "0");
    append_attack(kv, attack);
    kv.emplace_back("sweep.dataset_size", std::to_string(sweep.dataset_size));
    kv.emplace_back("sweep.dataset_seed", std::to_string(sweep.dataset_seed));
    kv.emplace_back("sweep.runs", std::to_string(sweep.runs));
    return kv;
  }

  static void append_defense(std::vector<std::pair<std::string, std::string>>& kv, const DefenseConfig& d) {
    kv.emplace_back("defense.forward_steps", std::to_string(d.forward_steps));
    kv.emplace_back("defense.denoising_steps", std::to_string(d.denoising_steps));
    kv.emplace_back("defense.sampler.kind", to_string(d.sampler.kind));
    kv.emplace_back("defense.sampler.k", detail::join(d.sampler.k_schedule));
    kv.emplace_back("defense.guidance.method", to_string(d.guidance.method));
    kv.emplace_back("defense.guidance.R", d.guidance.R ? detail::fmt_double(*d.guidance.R) : "");
    kv.emplace_back("defense.guidance.distance", to_string(d.guidance.distance));
    kv.emplace_back("defense.guidance.modulus_k", std::to_string(d.guidance.modulus_k));
    kv.emplace_back("defense.seed", std::to_string(d.seed));
  }

  static void append_attack(std::vector<std::pair<std::string, std::string>>& kv, const AttackConfig& a) {
    kv.emplace_back("attack.norm", to_string(a.norm));
    kv.emplace_back("attack.epsilon", detail::fmt_double(a.epsilon));
    kv.emplace_back("attack.iterations", std::to_string(a.iterations));
    kv.emplace_back("attack.eot_samples", std::to_string(a.eot_samples));
    kv.emplace_back("attack.step_size", detail::fmt_double(a.resolved_step()));
    kv.emplace_back("attack.attacker_forward_steps",
                    a.attacker_forward_steps ? std::to_string(*a.attacker_forward_steps) : "");
    kv.emplace_back("attack.attacker_denoising_steps",
                    a.attacker_denoising_steps ? std::to_string(*a.attacker_denoising_steps) : "");
    kv.emplace_back("attack.attacker_knows_guidance", a.attacker_knows_guidance ? "1" : "0");
    kv.emplace_back("attack.gradient_backend", to_string(a.gradient_backend));
    kv.emplace_back("attack.restarts", std::to_string(a.restarts));
    kv.emplace_back("attack.seed", std::to_string(a.seed));
  }

 private:
  static ExperimentConfig parse_over(ExperimentConfig c, const std::string& text) {
    detail::pt::ptree tree;
    std::istringstream in(text);
    try {
      detail::pt::read_ini(in, tree);
    } catch (const detail::pt::ini_parser_error& e) {
      throw InvalidArgument(std::string("config: ") + e.what());
    }
    const detail::Reader r(tree);

    r.get("schedule", "total_steps", c.schedule.total_steps);
    r.get("schedule", "beta_start", c.schedule.beta_start);
    r.get("schedule", "beta_end", c.schedule.beta_end);

    auto& m = c.mixture;
    r.get("mixture", "version", m.version);
    r.get("mixture", "dim", m.dim);
    r.get_list("mixture", "weights", m.weights);
    r.get_list("mixture", "labels", m.labels);
    r.get_list("mixture", "stddev", m.stddev);
    if (r.raw("mixture", "mean.0")) m.means.clear();
    for (std::size_t i = 0;; ++i) {
      const auto v = r.raw("mixture", "mean." + std::to_string(i));
      if (!v) break;
      const auto vals = detail::parse_list<double>(*v, "mixture.mean");
      require(static_cast<int>(vals.size()) == m.dim, "config: mixture.mean." + std::to_string(i) +
                                                          " must have dim entries");
      m.means.push_back(Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size())));
    }
    r.get("mixture", "temperature", m.temperature);
    r.get("mixture", "score_error", m.score_error);
    r.get("mixture", "score_error_seed", m.score_error_seed);
    require(m.weights.size() == m.means.size() && m.labels.size() == m.means.size() &&
                m.stddev.size() == m.means.size(),
            "config: mixture weights/labels/stddev/means must have one entry per component");

    auto& d = c.defense;
    r.get("defense", "forward_steps", d.forward_steps);
    r.get("defense", "denoising_steps", d.denoising_steps);
    if (auto kind = r.raw("defense", "sampler.kind")) {
      if (*kind == "custom") {
        d.sampler.kind = SamplerKind::CUSTOM;
      } else {
        d.sampler = parse_sampler(*kind);
      }
    }
    if (d.sampler.kind == SamplerKind::CUSTOM) {
      r.get_list("defense", "sampler.k", d.sampler.k_schedule);
    } else {
      d.sampler.k_schedule.clear();
    }
    if (auto v = r.raw("defense", "guidance.method")) d.guidance.method = parse_guidance_method(*v);
    if (auto v = r.raw("defense", "guidance.R")) {
      if (v->empty()) d.guidance.R.reset();
      else d.guidance.R = detail::parse_scalar<double>(*v, "defense.guidance.R");
    }
    if (auto v = r.raw("defense", "guidance.distance")) d.guidance.distance = parse_distance(*v);
    r.get("defense", "guidance.modulus_k", d.guidance.modulus_k);
    r.get("defense", "seed", d.seed);

    auto& a = c.attack;
    r.get_bool("attack", "enabled", c.attack_enabled);
    if (auto v = r.raw("attack", "norm")) a.norm = parse_norm(*v);
    r.get("attack", "epsilon", a.epsilon);
    r.get("attack", "iterations", a.iterations);
    r.get("attack", "eot_samples", a.eot_samples);
    if (auto v = r.raw("attack", "step_size")) {
      const double s = detail::parse_scalar<double>(*v, "attack.step_size");
      if (s > 0.0) a.step_size = s;
      else a.step_size.reset();
    }
    for (auto [key, field] : {std::pair{"attacker_forward_steps", &a.attacker_forward_steps},
                              std::pair{"attacker_denoising_steps", &a.attacker_denoising_steps}}) {
      if (auto v = r.raw("attack", key)) {
        const int n = detail::parse_scalar<int>(*v, std::string("attack.") + key);
        if (n > 0) *field = n;
        else field->reset();
      }
    }
    r.get_bool("attack", "attacker_knows_guidance", a.attacker_knows_guidance);
    if (auto v = r.raw("attack", "gradient_backend")) a.gradient_backend = parse_backend(*v);
    r.get("attack", "restarts", a.restarts);
    r.get("attack", "seed", a.seed);

    auto& s = c.sweep;
    r.get("sweep", "dataset_size", s.dataset_size);
    r.get("sweep", "dataset_seed", s.dataset_seed);
    r.get("sweep", "runs", s.runs);
    r.get("sweep", "threads", s.threads);
    r.get_list("sweep", "noise_rates", s.noise_rates);
    r.get_list("sweep", "forward_steps", s.forward_steps);
    if (auto v = r.raw("sweep", "guidance_methods")) {
      s.guidance_methods.clear();
      for (const auto& tok : detail::split_ws(*v)) s.guidance_methods.push_back(parse_guidance_method(tok));
    }
    r.get_list("sweep", "attacker_forward_steps", s.attacker_forward_steps);
    if (auto v = r.raw("sweep", "async_samplers")) {
      s.async_samplers.clear();
      for (const auto& tok : detail::split_ws(*v)) s.async_samplers.push_back(parse_sampler(tok));
    }

    c.validate();
    return c;
  }

 public:
  void validate() const {
    require(mixture.dim >= 1, "config: mixture.dim must be >= 1");
    require(sweep.dataset_size >= 1, "config: sweep.dataset_size must be >= 1");
    require(sweep.runs >= 1, "config: sweep.runs must be >= 1");
    const auto sch = build_schedule();
    build_mixture();
    defense.validate(sch);
    attack.validate();
  }
};

}  // namespace diffap
