#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "diffap/rng.hpp"
#include "diffap/types.hpp"

namespace diffap {

/// Labeled isotropic Gaussian mixture in [0,1]^d.
///
/// Serves three roles at once: the data prior behind the analytic score,
/// the distribution the evaluation set is drawn from, and (through its
/// labels) the Bayes classifier under attack.
class GaussianMixtureModel {
 public:
  GaussianMixtureModel(std::vector<double> weights, std::vector<Vec> means,
                       std::vector<double> variances, std::vector<int> labels)
      : weights_(std::move(weights)),
        means_(std::move(means)),
        variances_(std::move(variances)),
        labels_(std::move(labels)) {
    const std::size_t K = weights_.size();
    require(K >= 1, "GaussianMixtureModel: need at least one component");
    require(means_.size() == K && variances_.size() == K && labels_.size() == K,
            "GaussianMixtureModel: weights/means/variances/labels length mismatch");
    dim_ = means_.front().size();
    require(dim_ >= 1, "GaussianMixtureModel: dimension must be >= 1");
    double total = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      require(std::isfinite(weights_[i]) && weights_[i] > 0.0,
              "GaussianMixtureModel: weights must be positive");
      require(means_[i].size() == dim_, "GaussianMixtureModel: inconsistent mean dimension");
      require(means_[i].allFinite() && means_[i].minCoeff() >= 0.0 && means_[i].maxCoeff() <= 1.0,
              "GaussianMixtureModel: means must lie in [0,1]^d");
      require(std::isfinite(variances_[i]) && variances_[i] > 0.0,
              "GaussianMixtureModel: variances must be positive");
      require(labels_[i] >= 0, "GaussianMixtureModel: labels must be non-negative");
      total += weights_[i];
    }
    require(std::abs(total - 1.0) <= 1e-12, "GaussianMixtureModel: weights must sum to 1");
    num_classes_ = *std::max_element(labels_.begin(), labels_.end()) + 1;
    for (int c = 0; c < num_classes_; ++c)
      require(std::find(labels_.begin(), labels_.end(), c) != labels_.end(),
              "GaussianMixtureModel: every class needs at least one component");
    log_weights_.resize(K);
    for (std::size_t i = 0; i < K; ++i) log_weights_[i] = std::log(weights_[i]);
  }

  Eigen::Index dim() const { return dim_; }
  int components() const { return static_cast<int>(weights_.size()); }
  int num_classes() const { return num_classes_; }

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& log_weights() const { return log_weights_; }
  const std::vector<Vec>& means() const { return means_; }
  const std::vector<double>& variances() const { return variances_; }
  const std::vector<int>& labels() const { return labels_; }

  /// Prior probability mass of each class.
  std::vector<double> class_priors() const {
    std::vector<double> p(static_cast<std::size_t>(num_classes_), 0.0);
    for (std::size_t i = 0; i < weights_.size(); ++i)
      p[static_cast<std::size_t>(labels_[i])] += weights_[i];
    return p;
  }

  /// Analytic mean of the mixture.
  Vec mean() const {
    Vec m = Vec::Zero(dim_);
    for (std::size_t i = 0; i < weights_.size(); ++i) m += weights_[i] * means_[i];
    return m;
  }

  /// Analytic covariance of the mixture.
  Mat covariance() const {
    const Vec m = mean();
    Mat cov = Mat::Zero(dim_, dim_);
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      const Vec dm = means_[i] - m;
      cov += weights_[i] * (variances_[i] * Mat::Identity(dim_, dim_) + dm * dm.transpose());
    }
    return cov;
  }

  struct Draw {
    Vec x;
    int component = 0;
    int label = 0;
  };

  Draw sample(Rng& rng) const {
    double u = rng.uniform();
    int k = 0;
    for (; k + 1 < components(); ++k) {
      u -= weights_[static_cast<std::size_t>(k)];
      if (u < 0.0) break;
    }
    const auto ks = static_cast<std::size_t>(k);
    Vec x = means_[ks] + std::sqrt(variances_[ks]) * rng.normal_vec(dim_);
    return {std::move(x), k, labels_[ks]};
  }

 private:
  std::vector<double> weights_;
  std::vector<double> log_weights_;
  std::vector<Vec> means_;
  std::vector<double> variances_;
  std::vector<int> labels_;
  Eigen::Index dim_ = 0;
  int num_classes_ = 0;
};

inline double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace diffap
