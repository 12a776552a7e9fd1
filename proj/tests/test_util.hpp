#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "diffap/diffap.hpp"

namespace diffap::fixtures {

inline const NoiseSchedule& linear_schedule() {
  static const NoiseSchedule s = build_linear_schedule(1000, 1e-4, 0.02);
  return s;
}

/// Two classes in d=2, two components each, moderate overlap.
inline GaussianMixtureModel small_mixture() {
  Vec a(2), b(2), c(2), d(2);
  a << 0.2, 0.3;
  b << 0.7, 0.8;
  c << 0.8, 0.2;
  d << 0.35, 0.75;
  return GaussianMixtureModel({0.3, 0.2, 0.35, 0.15}, {a, b, c, d}, {0.02, 0.01, 0.03, 0.015}, {0, 0, 1, 1});
}

/// Single isotropic component.
inline GaussianMixtureModel single_gaussian(Eigen::Index d, double mean, double var) {
  return GaussianMixtureModel({1.0}, {Vec::Constant(d, mean)}, {var}, {0});
}

inline const ExperimentConfig& reference_config() { return ExperimentConfig::reference(); }

inline Vec uniform_vec(Rng& rng, Eigen::Index d, double lo = 0.0, double hi = 1.0) {
  Vec v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = lo + (hi - lo) * rng.uniform();
  return v;
}

/// Central-difference gradient of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  Vec g(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vec p = x, m = x;
    p[j] += h;
    m[j] -= h;
    g[j] = (f(p) - f(m)) / (2.0 * h);
  }
  return g;
}

/// Central-difference Jacobian, column j = d f / d x_j.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
  const Vec f0 = f(x);
  Mat J(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vec p = x, m = x;
    p[j] += h;
    m[j] -= h;
    J.col(j) = (f(p) - f(m)) / (2.0 * h);
  }
  return J;
}

inline double rel_err(const Vec& a, const Vec& b) {
  const double n = std::max(a.norm(), b.norm());
  return n == 0.0 ? 0.0 : (a - b).norm() / n;
}

}  // namespace diffap::fixtures
