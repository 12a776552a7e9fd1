#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "diffap/types.hpp"

namespace diffap {

/// Discrete variance schedule of the forward noising process.
///
/// Timesteps run 1..T. `alpha_bar(0) == 1` so step 0 denotes clean data.
/// Immutable after construction.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    require(!betas_.empty(), "NoiseSchedule: T must be >= 1");
    alphas_.resize(betas_.size());
    alpha_bars_.resize(betas_.size() + 1);
    alpha_bars_[0] = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      const double b = betas_[i];
      require(std::isfinite(b) && b > 0.0 && b < 1.0,
              "NoiseSchedule: betas must lie in (0,1)");
      if (i > 0) require(b >= betas_[i - 1], "NoiseSchedule: betas must be non-decreasing");
      alphas_[i] = 1.0 - b;
      alpha_bars_[i + 1] = alpha_bars_[i] * alphas_[i];
    }
  }

  int T() const { return static_cast<int>(betas_.size()); }

  /// beta_t for t in 1..T.
  double beta(Step t) const { return betas_.at(static_cast<std::size_t>(t - 1)); }
  double alpha(Step t) const { return alphas_.at(static_cast<std::size_t>(t - 1)); }
  /// Cumulative signal retention for t in 0..T.
  double alpha_bar(Step t) const { return alpha_bars_.at(static_cast<std::size_t>(t)); }

  std::span<const double> betas() const { return betas_; }
  std::span<const double> alphas() const { return alphas_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }

  void check_step(Step t, const char* where) const {
    require(t >= 0 && t <= T(), std::string(where) + ": step " + std::to_string(t) +
                                    " outside [0," + std::to_string(T()) + "]");
  }

 private:
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// Linearly increasing betas, endpoint-inclusive over t = 1..T.
inline NoiseSchedule build_linear_schedule(int T, double beta_1, double beta_T) {
  require(T >= 1, "build_linear_schedule: T must be >= 1");
  require(std::isfinite(beta_1) && std::isfinite(beta_T),
          "build_linear_schedule: betas must be finite");
  require(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0,
          "build_linear_schedule: need 0 < beta_1 <= beta_T < 1");
  std::vector<double> betas(static_cast<std::size_t>(T));
  if (T == 1) {
    betas[0] = beta_1;
  } else {
    for (int t = 1; t <= T; ++t)
      betas[static_cast<std::size_t>(t - 1)] =
          beta_1 + static_cast<double>(t - 1) / static_cast<double>(T - 1) * (beta_T - beta_1);
  }
  return NoiseSchedule(std::move(betas));
}

/// Decreasing denoising grid [M*floor(T/M), (M-1)*floor(T/M), ..., 0].
struct TimestepSubsequence {
  int M = 0;
  std::vector<Step> steps;

  Step top() const { return steps.front(); }
  /// Step visited when i denoising iterations remain (i = M..0).
  Step at_remaining(int i) const { return steps.at(static_cast<std::size_t>(M - i)); }
};

/// Subsequence over an explicit top step (the purifier's forward step t*).
inline TimestepSubsequence make_subsequence(int top, int M) {
  require(M >= 1, "make_subsequence: M must be >= 1");
  require(M <= top, "make_subsequence: M (" + std::to_string(M) +
                        ") exceeds the number of available steps (" + std::to_string(top) + ")");
  const int stride = top / M;
  TimestepSubsequence sub;
  sub.M = M;
  sub.steps.reserve(static_cast<std::size_t>(M) + 1);
  for (int i = 0; i <= M; ++i) sub.steps.push_back((M - i) * stride);
  return sub;
}

inline TimestepSubsequence make_subsequence(const NoiseSchedule& schedule, int M) {
  return make_subsequence(schedule.T(), M);
}

/// DDPM noise scale for the (possibly non-adjacent) transition t -> t_prev.
inline double ddpm_sigma(const NoiseSchedule& schedule, Step t, Step t_prev) {
  schedule.check_step(t, "ddpm_sigma");
  schedule.check_step(t_prev, "ddpm_sigma");
  require(t_prev < t, "ddpm_sigma: requires t_prev < t");
  const double ab_t = schedule.alpha_bar(t);
  const double ab_p = schedule.alpha_bar(t_prev);
  return std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
}

}  // namespace diffap
