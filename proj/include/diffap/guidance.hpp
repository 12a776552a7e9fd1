#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "diffap/rng.hpp"
#include "diffap/sampler.hpp"
#include "diffap/schedule.hpp"

namespace diffap {

enum class GuidanceMethod { NONE, MEDIATOR, GDMP, DPS };
enum class Distance { MSE, L1, L2 };

struct GuidanceSpec {
  GuidanceMethod method = GuidanceMethod::MEDIATOR;
  /// Guided factor. Unset means d/4 for MSE, which moves the mediator
  /// halfway to the guide in one step.
  std::optional<double> R;
  Distance distance = Distance::MSE;
  /// Guide when the remaining-step index i satisfies i % modulus_k == 0.
  int modulus_k = 2;

  static GuidanceSpec none() { return {GuidanceMethod::NONE, std::nullopt, Distance::MSE, 1}; }

  void validate() const {
    require(modulus_k >= 1, "GuidanceSpec: modulus_k must be >= 1");
    if (R) require(std::isfinite(*R) && *R > 0.0, "GuidanceSpec: R must be > 0");
  }

  double resolved_R(Eigen::Index dim) const {
    if (R) return *R;
    require(distance == Distance::MSE, "GuidanceSpec: R must be given explicitly for L1/L2");
    return static_cast<double>(dim) / 4.0;
  }
};

inline std::string to_string(GuidanceMethod m) {
  switch (m) {
    case GuidanceMethod::NONE: return "none";
    case GuidanceMethod::MEDIATOR: return "mediator";
    case GuidanceMethod::GDMP: return "gdmp";
    case GuidanceMethod::DPS: return "dps";
  }
  return "?";
}

inline std::string to_string(Distance d) {
  switch (d) {
    case Distance::MSE: return "mse";
    case Distance::L1: return "l1";
    case Distance::L2: return "l2";
  }
  return "?";
}

inline GuidanceMethod parse_guidance_method(const std::string& s) {
  if (s == "none") return GuidanceMethod::NONE;
  if (s == "mediator") return GuidanceMethod::MEDIATOR;
  if (s == "gdmp") return GuidanceMethod::GDMP;
  if (s == "dps") return GuidanceMethod::DPS;
  throw InvalidArgument("unknown guidance method '" + s + "'");
}

inline Distance parse_distance(const std::string& s) {
  if (s == "mse") return Distance::MSE;
  if (s == "l1") return Distance::L1;
  if (s == "l2") return Distance::L2;
  throw InvalidArgument("unknown distance '" + s + "'");
}

/// grad_a d(a, b). The L2 subgradient at a == b is zero.
inline Vec distance_gradient(Distance distance, const Vec& a, const Vec& b) {
  require_same_dim(a, b, "distance_gradient");
  const Vec diff = a - b;
  switch (distance) {
    case Distance::MSE:
      return 2.0 * diff / static_cast<double>(a.size());
    case Distance::L2: {
      const double n = diff.norm();
      if (n == 0.0) return Vec::Zero(a.size());
      return diff / n;
    }
    case Distance::L1:
      return diff.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
  }
  return Vec::Zero(a.size());
}

/// (d grad_a d / d a)^T w. The Jacobian is symmetric and d/db = -d/da.
inline Vec distance_gradient_vjp(Distance distance, const Vec& a, const Vec& b, const Vec& w) {
  switch (distance) {
    case Distance::MSE:
      return 2.0 * w / static_cast<double>(a.size());
    case Distance::L2: {
      const Vec diff = a - b;
      const double n = diff.norm();
      if (n == 0.0) return Vec::Zero(a.size());
      const Vec u = diff / n;
      return (w - u * u.dot(w)) / n;
    }
    case Distance::L1:
      return Vec::Zero(a.size());
  }
  return Vec::Zero(a.size());
}

inline double distance_value(Distance distance, const Vec& a, const Vec& b) {
  const Vec diff = a - b;
  switch (distance) {
    case Distance::MSE: return diff.squaredNorm() / static_cast<double>(a.size());
    case Distance::L2: return diff.norm();
    case Distance::L1: return diff.lpNorm<1>();
  }
  return 0.0;
}

inline bool should_guide(int i, int modulus_k) {
  require(i >= 1, "should_guide: step index must be >= 1");
  require(modulus_k >= 1, "should_guide: modulus must be >= 1");
  return i % modulus_k == 0;
}

/// One guided step recorded by the purifier.
struct GuidanceRecord {
  Step t = 0;
  Vec guidance_vector;  // displacement applied by the rule
  Vec bias;             // rule-specific bias term (zero for the mediator)
  bool amplification_flagged = false;
};

struct GuidanceDiagnostics {
  std::vector<GuidanceRecord> records;
};

/// Pulls the mediator x0_tilde toward the guide along -R grad d.
inline Vec mediator_guide(const Vec& x0_tilde, const Vec& x_guide, const GuidanceSpec& spec,
                          Step /*t*/) {
  require(spec.method == GuidanceMethod::MEDIATOR, "mediator_guide: spec.method must be MEDIATOR");
  require_same_dim(x0_tilde, x_guide, "mediator_guide");
  const double R = spec.resolved_R(x0_tilde.size());
  return x0_tilde - R * distance_gradient(spec.distance, x0_tilde, x_guide);
}

/// Noisy state guided toward a one-step-forward copy of the guide built from z2.
inline Vec gdmp_guide(const NoiseSchedule& schedule, const Vec& x_t, const Vec& x_guide, Step t,
                      const GuidanceSpec& spec, const Vec& z2) {
  require(spec.method == GuidanceMethod::GDMP, "gdmp_guide: spec.method must be GDMP");
  schedule.check_step(t, "gdmp_guide");
  require_same_dim(x_t, x_guide, "gdmp_guide");
  const Vec target = forward_noise(schedule, x_guide, t, z2);
  return x_t - spec.resolved_R(x_t.size()) * distance_gradient(spec.distance, x_t, target);
}

inline Vec gdmp_guide(const NoiseSchedule& schedule, const Vec& x_t, const Vec& x_guide, Step t,
                      const GuidanceSpec& spec, Rng& rng) {
  require(t >= 1, "gdmp_guide: t must be >= 1");
  return gdmp_guide(schedule, x_t, x_guide, t, spec, rng.normal_vec(x_t.size()));
}

/// 1/sqrt(alpha_bar_t): how much the DPS rule inflates the mediator gradient.
inline double dps_amplification(const NoiseSchedule& schedule, Step t) {
  return 1.0 / std::sqrt(schedule.alpha_bar(t));
}

inline constexpr double kDpsFlagAlphaBar = 1e-12;

/// Applies the time-t mediator gradient, amplified by 1/sqrt(ab_t), to the
/// time-t_prev state. Nothing is clamped.
inline Vec dps_guide(const NoiseSchedule& schedule, const Vec& x_prev, const Vec& x0_tilde_t,
                     const Vec& x_guide, Step t, const GuidanceSpec& spec,
                     GuidanceDiagnostics* diag = nullptr) {
  require(spec.method == GuidanceMethod::DPS, "dps_guide: spec.method must be DPS");
  schedule.check_step(t, "dps_guide");
  require(t >= 1, "dps_guide: t must be >= 1");
  require_same_dim(x_prev, x0_tilde_t, "dps_guide");
  require_same_dim(x_prev, x_guide, "dps_guide");
  const double R = spec.resolved_R(x_prev.size());
  const double amp = dps_amplification(schedule, t);
  const Vec g = distance_gradient(spec.distance, x0_tilde_t, x_guide);
  const Vec move = -R * amp * g;
  if (diag) {
    diag->records.push_back(
        {t, move, -R * (amp - 1.0) * g, schedule.alpha_bar(t) < kDpsFlagAlphaBar});
  }
  return x_prev + move;
}

/// Monte-Carlo RMS (per coordinate) of the GDMP bias term
/// sqrt(1 - ab_t) (z1 - z2), with z1 and z2 drawn from their own streams.
inline double gdmp_bias_estimate(const NoiseSchedule& schedule, Step t, int n_samples,
                                 Eigen::Index dim, Rng& z1_stream, Rng& z2_stream) {
  schedule.check_step(t, "gdmp_bias_estimate");
  require(n_samples >= 100, "gdmp_bias_estimate: need at least 100 samples");
  require(dim >= 1, "gdmp_bias_estimate: dim must be >= 1");
  const double c = std::sqrt(1.0 - schedule.alpha_bar(t));
  double ss = 0.0;
  for (int n = 0; n < n_samples; ++n) {
    const Vec z1 = z1_stream.normal_vec(dim);
    const Vec z2 = z2_stream.normal_vec(dim);
    ss += (c * (z1 - z2)).squaredNorm();
  }
  return std::sqrt(ss / (static_cast<double>(n_samples) * static_cast<double>(dim)));
}

inline double gdmp_bias_estimate(const NoiseSchedule& schedule, Step t, int n_samples,
                                 Eigen::Index dim, std::uint64_t seed) {
  Rng z1(derive_seed(seed, {1})), z2(derive_seed(seed, {2}));
  return gdmp_bias_estimate(schedule, t, n_samples, dim, z1, z2);
}

/// Closed form of the quantity gdmp_bias_estimate samples: sqrt(2 (1 - ab_t)).
inline double gdmp_bias_theory(const NoiseSchedule& schedule, Step t) {
  return std::sqrt(2.0 * (1.0 - schedule.alpha_bar(t)));
}

}  // namespace diffap
