#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "diffap/mixture.hpp"

namespace diffap {

/// Exact Bayes posterior p(y | x) of the labeled mixture, sharpened or
/// flattened by a softmax temperature on the class log-likelihoods.
class ClassifierHead {
 public:
  explicit ClassifierHead(GaussianMixtureModel gmm, double temperature = 1.0)
      : gmm_(std::move(gmm)), temperature_(temperature) {
    require(std::isfinite(temperature_) && temperature_ > 0.0,
            "ClassifierHead: temperature must be > 0");
  }

  int num_classes() const { return gmm_.num_classes(); }
  double temperature() const { return temperature_; }
  const GaussianMixtureModel& gmm() const { return gmm_; }

  struct Eval {
    Vec log_probs;        // tempered, normalized
    Vec class_loglik;     // log sum_{i in c} w_i N(x; mu_i, s_i^2)
    Mat class_grads;      // d x C, grad_x of class_loglik
  };

  Eval evaluate(const Vec& x, bool with_grads) const {
    require(x.size() == gmm_.dim(), "ClassifierHead: dimension mismatch");
    require(x.allFinite(), "ClassifierHead: non-finite input");
    const int K = gmm_.components();
    const int C = num_classes();
    const auto d = static_cast<double>(x.size());
    Vec comp(K);
    for (int i = 0; i < K; ++i) {
      const auto is = static_cast<std::size_t>(i);
      const double v = gmm_.variances()[is];
      comp[i] = gmm_.log_weights()[is] - 0.5 * (x - gmm_.means()[is]).squaredNorm() / v -
                0.5 * d * std::log(2.0 * std::numbers::pi * v);
    }
    Eval ev;
    ev.class_loglik = Vec::Constant(C, -std::numeric_limits<double>::infinity());
    for (int c = 0; c < C; ++c) {
      double m = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < K; ++i)
        if (gmm_.labels()[static_cast<std::size_t>(i)] == c) m = std::max(m, comp[i]);
      double s = 0.0;
      for (int i = 0; i < K; ++i)
        if (gmm_.labels()[static_cast<std::size_t>(i)] == c) s += std::exp(comp[i] - m);
      ev.class_loglik[c] = m + std::log(s);
    }
    const Vec scaled = ev.class_loglik / temperature_;
    ev.log_probs = scaled.array() - log_sum_exp(scaled);
    if (with_grads) {
      ev.class_grads = Mat::Zero(x.size(), C);
      for (int i = 0; i < K; ++i) {
        const auto is = static_cast<std::size_t>(i);
        const int c = gmm_.labels()[is];
        const double w = std::exp(comp[i] - ev.class_loglik[c]);
        ev.class_grads.col(c) += w * (-(x - gmm_.means()[is]) / gmm_.variances()[is]);
      }
    }
    return ev;
  }

  Vec class_log_probs(const Vec& x) const { return evaluate(x, false).log_probs; }

  int predict(const Vec& x) const {
    if (!x.allFinite()) return -1;
    Eigen::Index best = 0;
    class_log_probs(x).maxCoeff(&best);
    return static_cast<int>(best);
  }

  /// grad_x log p(y | x).
  Vec class_grad(const Vec& x, int y) const {
    require(y >= 0 && y < num_classes(), "class_grad: label out of range");
    const Eval ev = evaluate(x, true);
    const Vec probs = ev.log_probs.array().exp();
    return (ev.class_grads.col(y) - ev.class_grads * probs) / temperature_;
  }

 private:
  GaussianMixtureModel gmm_;
  double temperature_ = 1.0;
};

/// Fraction of inputs whose argmax class matches the label. Non-finite
/// inputs (a diverged purification) count as misclassified.
inline double accuracy(const ClassifierHead& head, std::span<const Vec> inputs,
                       std::span<const int> labels) {
  require(!inputs.empty(), "accuracy: empty batch");
  require(inputs.size() == labels.size(), "accuracy: inputs/labels length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (head.predict(inputs[i]) == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(inputs.size());
}

}  // namespace diffap
