#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "diffap/rng.hpp"
#include "diffap/schedule.hpp"
#include "diffap/score.hpp"

namespace diffap {

enum class SamplerKind { DDIM, DDPM, RANDOM, CUSTOM };

/// Selects a member of the reverse-sampling family by its fresh-noise
/// proportion k_t: DDIM is k = 0, random sampling is k = 1, DDPM derives
/// k per transition from the DDPM sigma.
struct SamplerSpec {
  SamplerKind kind = SamplerKind::RANDOM;
  /// For CUSTOM: one value (broadcast) or one value per transition, in
  /// chain order (first entry is the transition out of the top step).
  std::vector<double> k_schedule;

  static SamplerSpec ddim() { return {SamplerKind::DDIM, {}}; }
  static SamplerSpec ddpm() { return {SamplerKind::DDPM, {}}; }
  static SamplerSpec random() { return {SamplerKind::RANDOM, {}}; }
  static SamplerSpec custom(double k) { return {SamplerKind::CUSTOM, {k}}; }

  void validate() const {
    if (kind != SamplerKind::CUSTOM) return;
    require(!k_schedule.empty(), "SamplerSpec: CUSTOM needs a k schedule");
    for (double k : k_schedule)
      require(std::isfinite(k) && k >= 0.0 && k <= 1.0, "SamplerSpec: k must lie in [0,1]");
  }

  /// Fresh-noise proportion for transition number `index` (0-based) t -> t_prev.
  double k_at(const NoiseSchedule& schedule, std::size_t index, Step t, Step t_prev) const {
    switch (kind) {
      case SamplerKind::DDIM:
        return 0.0;
      case SamplerKind::RANDOM:
        return 1.0;
      case SamplerKind::DDPM: {
        const double room = 1.0 - schedule.alpha_bar(t_prev);
        if (room <= 0.0) return 0.0;
        const double s = ddpm_sigma(schedule, t, t_prev);
        return std::min(1.0, s * s / room);
      }
      case SamplerKind::CUSTOM:
        return k_schedule.size() == 1 ? k_schedule.front() : k_schedule.at(index);
    }
    return 0.0;
  }
};

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::DDIM: return "ddim";
    case SamplerKind::DDPM: return "ddpm";
    case SamplerKind::RANDOM: return "random";
    case SamplerKind::CUSTOM: return "custom";
  }
  return "?";
}

/// Parses "ddim", "ddpm", "random" or "k=<v>".
inline SamplerSpec parse_sampler(const std::string& s) {
  if (s == "ddim") return SamplerSpec::ddim();
  if (s == "ddpm") return SamplerSpec::ddpm();
  if (s == "random") return SamplerSpec::random();
  if (s.rfind("k=", 0) == 0) {
    std::size_t used = 0;
    double k = 0.0;
    try {
      k = std::stod(s.substr(2), &used);
    } catch (const std::exception&) {
      throw InvalidArgument("parse_sampler: bad k value in '" + s + "'");
    }
    require(used == s.size() - 2, "parse_sampler: bad k value in '" + s + "'");
    auto spec = SamplerSpec::custom(k);
    spec.validate();
    return spec;
  }
  throw InvalidArgument("parse_sampler: unknown sampler '" + s + "'");
}

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
inline Vec forward_noise(const NoiseSchedule& schedule, const Vec& x0, Step t, const Vec& eps) {
  schedule.check_step(t, "forward_noise");
  require_same_dim(x0, eps, "forward_noise");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

/// Posterior-mean estimate of x0 implied by (x_t, eps_hat).
inline Vec posterior_x0(const NoiseSchedule& schedule, const Vec& x_t, Step t, const Vec& eps_hat) {
  schedule.check_step(t, "posterior_x0");
  require(t >= 1, "posterior_x0: t = 0 rejected");
  require_same_dim(x_t, eps_hat, "posterior_x0");
  const double ab = schedule.alpha_bar(t);
  return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

/// Re-noises a clean estimate to t_prev keeping a (1-k) share of the
/// predicted noise direction and drawing a k share fresh.
inline Vec renoise(const NoiseSchedule& schedule, const Vec& x0_hat, Step t_prev,
                   const Vec& eps_hat, double k, const Vec& z) {
  const double ab_p = schedule.alpha_bar(t_prev);
  const double c = std::sqrt(1.0 - ab_p);
  Vec out = std::sqrt(ab_p) * x0_hat;
  if (k < 1.0) out += std::sqrt(1.0 - k) * c * eps_hat;
  if (k > 0.0) out += std::sqrt(k) * c * z;
  return out;
}

/// One reverse step of the k-parameterized family.
inline Vec generalized_step(const NoiseSchedule& schedule, const Vec& x_t, Step t, Step t_prev,
                            const Vec& eps_hat, double k, const Vec& z) {
  schedule.check_step(t, "generalized_step");
  schedule.check_step(t_prev, "generalized_step");
  require(t_prev < t, "generalized_step: requires t_prev < t");
  require(std::isfinite(k) && k >= 0.0 && k <= 1.0, "generalized_step: k must lie in [0,1]");
  require_same_dim(x_t, z, "generalized_step");
  const Vec x0 = posterior_x0(schedule, x_t, t, eps_hat);
  return renoise(schedule, x0, t_prev, eps_hat, k, z);
}

/// The same step in its sigma parameterization.
inline Vec sigma_step(const NoiseSchedule& schedule, const Vec& x_t, Step t, Step t_prev,
                      const Vec& eps_hat, double sigma, const Vec& z) {
  schedule.check_step(t, "sigma_step");
  schedule.check_step(t_prev, "sigma_step");
  require(t_prev < t, "sigma_step: requires t_prev < t");
  require_same_dim(x_t, z, "sigma_step");
  const double ab_p = schedule.alpha_bar(t_prev);
  require(std::isfinite(sigma) && sigma >= 0.0, "sigma_step: sigma must be >= 0");
  double radicand = 1.0 - ab_p - sigma * sigma;
  // sigma = sqrt(1 - ab) squares back with an ulp of error; that is the k = 1 endpoint.
  const double slack = 8.0 * std::numeric_limits<double>::epsilon() * (1.0 - ab_p);
  require(radicand >= -slack, "sigma_step: sigma^2 exceeds 1 - alpha_bar(t_prev)");
  if (radicand <= slack) radicand = 0.0;
  const Vec x0 = posterior_x0(schedule, x_t, t, eps_hat);
  return std::sqrt(ab_p) * x0 + std::sqrt(radicand) * eps_hat + sigma * z;
}

struct TrajectoryPoint {
  Step t = 0;
  Vec x_t;
  Vec x0_hat;
};

/// Reverse-chain states in visiting order; the last entry is t = 0.
struct Trajectory {
  std::vector<TrajectoryPoint> points;
};

struct ReverseResult {
  Vec x0;
  Trajectory trajectory;
};

/// Unguided reverse chain over `subseq`, starting from the state at its top
/// step. The chain consumes `rng` in a fixed order (score error, then z) per
/// transition, so equal seeds reproduce it bit for bit.
inline ReverseResult run_reverse(const ScoreOracle& oracle, const NoiseSchedule& schedule,
                                 const TimestepSubsequence& subseq, const SamplerSpec& spec,
                                 const Vec& x_start, Rng& rng, bool record = true) {
  spec.validate();
  require(x_start.size() == oracle.dim(), "run_reverse: dimension mismatch");
  ReverseResult out;
  Vec x = x_start;
  for (std::size_t p = 0; p + 1 < subseq.steps.size(); ++p) {
    const Step t = subseq.steps[p];
    const Step t_prev = subseq.steps[p + 1];
    const Vec eps = oracle.epsilon(x, t, rng);
    const Vec z = rng.normal_vec(x.size());
    const double k = spec.k_at(schedule, p, t, t_prev);
    const Vec x0 = posterior_x0(schedule, x, t, eps);
    if (record) out.trajectory.points.push_back({t, x, x0});
    x = renoise(schedule, x0, t_prev, eps, k, z);
  }
  if (record) out.trajectory.points.push_back({0, x, x});
  out.x0 = std::move(x);
  return out;
}

/// Per-step across-run spread of x_t: root of the coordinate-averaged
/// sample variance at each matched step.
inline std::vector<double> trajectory_dispersion(const std::vector<Trajectory>& runs) {
  require(runs.size() >= 2, "trajectory_dispersion: need at least two trajectories");
  const auto& grid = runs.front().points;
  for (const auto& r : runs) {
    require(r.points.size() == grid.size(), "trajectory_dispersion: mismatched step grids");
    for (std::size_t j = 0; j < grid.size(); ++j)
      require(r.points[j].t == grid[j].t, "trajectory_dispersion: mismatched step grids");
  }
  const auto n = static_cast<double>(runs.size());
  std::vector<double> out;
  out.reserve(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) {
    Vec mean = Vec::Zero(grid[j].x_t.size());
    for (const auto& r : runs) mean += r.points[j].x_t;
    mean /= n;
    double ss = 0.0;
    for (const auto& r : runs) ss += (r.points[j].x_t - mean).squaredNorm();
    out.push_back(std::sqrt(ss / ((n - 1.0) * static_cast<double>(mean.size()))));
  }
  return out;
}

}  // namespace diffap
