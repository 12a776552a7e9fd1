#pragma once

#include <cmath>
#include <numbers>
#include <optional>

#include "diffap/mixture.hpp"
#include "diffap/rng.hpp"
#include "diffap/schedule.hpp"

namespace diffap {

/// Additive Gaussian perturbation of the score, standing in for an
/// imperfectly trained noise-prediction network.
struct ScoreErrorSpec {
  double additive_noise_scale = 0.0;
  std::uint64_t seed = 0;
};

/// Everything the marginal score at (x, t) is made of. Kept around by the
/// reverse-mode chain so Hessian-vector products cost O(K d).
struct ScoreEval {
  Vec score;            // grad_x log p_t(x)
  Vec resp;             // component responsibilities, sums to 1
  Mat comp_scores;      // d x K, column i = -(x - sqrt(ab) mu_i) / v_i
  Vec inv_var;          // 1 / v_i
  double log_density = 0.0;

  /// H u where H is the Hessian of log p_t at x (symmetric).
  Vec hvp(const Vec& u) const {
    const Vec proj = comp_scores.transpose() * u;  // s_i . u
    Vec out = -(resp.cwiseProduct(inv_var)).sum() * u;
    out += comp_scores * resp.cwiseProduct(proj);
    out -= score * score.dot(u);
    return out;
  }

  Mat hessian() const {
    const auto d = score.size();
    Mat h = Mat::Zero(d, d);
    for (Eigen::Index i = 0; i < resp.size(); ++i) {
      h.diagonal().array() -= resp[i] * inv_var[i];
      h.noalias() += resp[i] * comp_scores.col(i) * comp_scores.col(i).transpose();
    }
    h.noalias() -= score * score.transpose();
    return h;
  }
};

/// Closed-form noise prediction for Gaussian-mixture data.
///
/// The forward process maps component N(mu, s^2 I) to
/// N(sqrt(ab_t) mu, (ab_t s^2 + 1 - ab_t) I), so the marginal at every t is
/// again a mixture and its score is exact.
class ScoreOracle {
 public:
  ScoreOracle(GaussianMixtureModel gmm, NoiseSchedule schedule,
              std::optional<ScoreErrorSpec> error = std::nullopt)
      : gmm_(std::move(gmm)), schedule_(std::move(schedule)), error_(error) {
    if (error_)
      require(std::isfinite(error_->additive_noise_scale) && error_->additive_noise_scale >= 0.0,
              "ScoreOracle: additive_noise_scale must be >= 0");
  }

  const GaussianMixtureModel& gmm() const { return gmm_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Eigen::Index dim() const { return gmm_.dim(); }

  const std::optional<ScoreErrorSpec>& error_spec() const { return error_; }
  bool has_error() const { return error_ && error_->additive_noise_scale > 0.0; }
  double error_scale() const { return error_ ? error_->additive_noise_scale : 0.0; }

  ScoreOracle exact() const { return ScoreOracle(gmm_, schedule_); }

  ScoreEval evaluate(const Vec& x, Step t) const {
    check(x, t, "ScoreOracle");
    const double ab = schedule_.alpha_bar(t);
    const double a = std::sqrt(ab);
    const int K = gmm_.components();
    const auto d = static_cast<double>(x.size());
    ScoreEval ev;
    ev.comp_scores.resize(x.size(), K);
    ev.inv_var.resize(K);
    Vec logp(K);
    for (int i = 0; i < K; ++i) {
      const auto is = static_cast<std::size_t>(i);
      const double v = ab * gmm_.variances()[is] + (1.0 - ab);
      ev.inv_var[i] = 1.0 / v;
      ev.comp_scores.col(i) = -(x - a * gmm_.means()[is]) / v;
      const double sq = (x - a * gmm_.means()[is]).squaredNorm();
      logp[i] = gmm_.log_weights()[is] - 0.5 * sq / v -
                0.5 * d * std::log(2.0 * std::numbers::pi * v);
    }
    ev.log_density = log_sum_exp(logp);
    ev.resp = (logp.array() - ev.log_density).exp().matrix();
    ev.score = ev.comp_scores * ev.resp;
    return ev;
  }

  double marginal_log_density(const Vec& x, Step t) const { return evaluate(x, t).log_density; }

  /// Exact score grad_x log p_t(x).
  Vec score(const Vec& x, Step t) const { return evaluate(x, t).score; }

  /// Score with the configured model-error perturbation drawn from `rng`.
  Vec score(const Vec& x, Step t, Rng& rng) const {
    Vec s = score(x, t);
    if (has_error()) s += error_->additive_noise_scale * rng.normal_vec(x.size());
    return s;
  }

  /// Noise prediction eps = -sqrt(1 - ab_t) * score.
  Vec epsilon(const Vec& x, Step t) const {
    require(t >= 1, "epsilon: t = 0 has no noise to predict");
    return -std::sqrt(1.0 - schedule_.alpha_bar(t)) * score(x, t);
  }

  Vec epsilon(const Vec& x, Step t, Rng& rng) const {
    require(t >= 1, "epsilon: t = 0 has no noise to predict");
    return -std::sqrt(1.0 - schedule_.alpha_bar(t)) * score(x, t, rng);
  }

  /// d score / d x. Only defined for the exact score.
  Mat score_jacobian(const Vec& x, Step t) const {
    require(!has_error(), "score_jacobian: undefined while score error injection is active");
    return evaluate(x, t).hessian();
  }

 private:
  void check(const Vec& x, Step t, const char* where) const {
    schedule_.check_step(t, where);
    require(x.size() == gmm_.dim(), std::string(where) + ": dimension mismatch");
    require(x.allFinite(), std::string(where) + ": non-finite input");
  }

  GaussianMixtureModel gmm_;
  NoiseSchedule schedule_;
  std::optional<ScoreErrorSpec> error_;
};

}  // namespace diffap
