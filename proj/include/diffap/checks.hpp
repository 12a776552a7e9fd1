#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "diffap/harness.hpp"

namespace diffap {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Number of adjacent pairs with v[i+1] < v[i].
inline int count_decreases(const std::vector<double>& v) {
  int n = 0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) n += v[i + 1] < v[i] ? 1 : 0;
  return n;
}

inline int count_increases(const std::vector<double>& v) {
  int n = 0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) n += v[i + 1] > v[i] ? 1 : 0;
  return n;
}

inline double spread(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

inline std::string fmt_series(const std::vector<double>& v) {
  std::ostringstream o;
  o.precision(4);
  o << '[';
  for (std::size_t i = 0; i < v.size(); ++i) o << (i ? " " : "") << v[i];
  return o.str() + "]";
}

inline std::vector<double> standard_means(const std::vector<ExperimentReport>& reps) {
  std::vector<double> v;
  for (const auto& r : reps) v.push_back(r.standard_acc_mean);
  return v;
}

inline std::vector<double> robust_means(const std::vector<ExperimentReport>& reps) {
  std::vector<double> v;
  for (const auto& r : reps) v.push_back(r.robust_acc_mean);
  return v;
}

/// Mean/std recomputed from rows agree with the stored summary.
inline CheckResult check_aggregation(const std::vector<ExperimentReport>& reps, double tol = 1e-12) {
  double worst = 0.0;
  for (const auto& rep : reps) {
    ExperimentReport copy = rep;
    aggregate(copy);
    worst = std::max(worst, std::abs(copy.standard_acc_mean - rep.standard_acc_mean));
    worst = std::max(worst, std::abs(copy.standard_acc_std - rep.standard_acc_std));
    if (rep.has_attack) {
      worst = std::max(worst, std::abs(copy.robust_acc_mean - rep.robust_acc_mean));
      worst = std::max(worst, std::abs(copy.robust_acc_std - rep.robust_acc_std));
    }
    if (rep.aborted) return {"aggregation", false, "report '" + rep.label + "' aborted: " + *rep.aborted};
  }
  return {"aggregation", worst <= tol, "max deviation " + std::to_string(worst)};
}

/// Robust accuracy non-decreasing in k (one adjacent violation allowed),
/// largest k strictly above smallest.
inline CheckResult check_noise_rate(const std::vector<ExperimentReport>& reps) {
  const auto rob = robust_means(reps);
  const int bad = count_decreases(rob);
  const bool pass = reps.size() >= 2 && bad <= 1 && rob.back() > rob.front();
  return {"noise-rate trend", pass,
          "robust " + fmt_series(rob) + " decreases=" + std::to_string(bad) + " standard " +
              fmt_series(standard_means(reps))};
}

inline CheckResult check_flat_standard(const std::vector<ExperimentReport>& reps, double max_spread = 0.03) {
  const auto s = standard_means(reps);
  return {"standard accuracy flat", spread(s) <= max_spread,
          "standard " + fmt_series(s) + " spread=" + std::to_string(spread(s))};
}

/// Groups reports of a guidance sweep by method, in grid order.
inline std::map<std::string, std::vector<const ExperimentReport*>> by_key(
    const std::vector<ExperimentReport>& reps, const std::string& key) {
  std::map<std::string, std::vector<const ExperimentReport*>> out;
  for (const auto& r : reps) out[r.config_value(key)].push_back(&r);
  return out;
}

inline std::vector<double> standard_of(const std::vector<const ExperimentReport*>& reps) {
  std::vector<double> v;
  for (const auto* r : reps) v.push_back(r->standard_acc_mean);
  return v;
}

inline std::vector<double> robust_of(const std::vector<const ExperimentReport*>& reps) {
  std::vector<double> v;
  for (const auto* r : reps) v.push_back(r->robust_acc_mean);
  return v;
}

/// Shapes of the standard-accuracy curves over forward steps:
/// mediator flat (<= 3 points), GDMP declining (last below first, at most
/// one adjacent rise), DPS collapsed at the largest step (within 15 points
/// of the prior guess), unguided within 3 Monte-Carlo sigma of the prior.
inline std::vector<CheckResult> check_guidance_shapes(const std::vector<ExperimentReport>& reps,
                                                      double prior, int samples_per_point) {
  std::vector<CheckResult> out;
  const auto groups = by_key(reps, "sweep.guidance");
  auto series = [&](const std::string& m) {
    auto it = groups.find(m);
    return it == groups.end() ? std::vector<double>{} : standard_of(it->second);
  };
  if (auto s = series("mediator"); !s.empty())
    out.push_back({"mediator flat", spread(s) <= 0.03, fmt_series(s)});
  if (auto s = series("gdmp"); !s.empty())
    out.push_back({"gdmp declining", s.back() < s.front() && count_increases(s) <= 1, fmt_series(s)});
  if (auto s = series("dps"); !s.empty())
    out.push_back({"dps collapse", s.back() <= prior + 0.15, fmt_series(s)});
  if (auto s = series("none"); !s.empty()) {
    const double sigma = std::sqrt(prior * (1.0 - prior) / samples_per_point);
    out.push_back({"none to prior", std::abs(s.back() - prior) <= 3.0 * sigma,
                   fmt_series(s) + " prior=" + std::to_string(prior)});
  }
  return out;
}

/// Asynchronous sweep: for DDPM and DDIM the attacker at `async_step`
/// beats the synchronous attacker; RANDOM keeps the top robust accuracy at
/// every attacker grid point.
inline std::vector<CheckResult> check_async(const std::vector<ExperimentReport>& reps, int async_step) {
  std::vector<CheckResult> out;
  std::map<std::string, std::map<std::string, double>> rob;  // sampler -> attacker step -> acc
  for (const auto& r : reps)
    rob[r.config_value("sweep.sampler")][r.config_value("sweep.attacker_forward_steps")] = r.robust_acc_mean;
  const std::string key = std::to_string(async_step);
  for (const std::string s : {"ddpm", "ddim"}) {
    if (!rob.count(s) || !rob[s].count("sync") || !rob[s].count(key)) continue;
    const double sync = rob[s]["sync"], asy = rob[s][key];
    out.push_back({s + " async below sync", asy < sync,
                   "async=" + std::to_string(asy) + " sync=" + std::to_string(sync)});
  }
  if (rob.count("random")) {
    bool ok = true;
    std::ostringstream detail;
    for (const auto& [step, acc] : rob["random"]) {
      if (step == "sync") continue;
      detail << step << ":" << acc;
      for (const auto& [other, m] : rob) {
        if (other == "random" || !m.count(step)) continue;
        detail << "/" << other << "=" << m.at(step);
        ok = ok && acc > m.at(step);
      }
      detail << ' ';
    }
    out.push_back({"random dominates", ok, detail.str()});
  }
  return out;
}

}  // namespace diffap
