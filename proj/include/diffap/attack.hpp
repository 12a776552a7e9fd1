#pragma once

#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "diffap/classifier.hpp"
#include "diffap/purifier.hpp"

namespace diffap {

enum class Norm { LINF, L2 };
enum class GradientBackend { ANALYTIC_CHAIN, FINITE_DIFF, SURROGATE };

inline std::string to_string(Norm n) { return n == Norm::LINF ? "linf" : "l2"; }

inline std::string to_string(GradientBackend b) {
  switch (b) {
    case GradientBackend::ANALYTIC_CHAIN: return "analytic";
    case GradientBackend::FINITE_DIFF: return "finite_diff";
    case GradientBackend::SURROGATE: return "surrogate";
  }
  return "?";
}

inline Norm parse_norm(const std::string& s) {
  if (s == "linf") return Norm::LINF;
  if (s == "l2") return Norm::L2;
  throw InvalidArgument("unknown norm '" + s + "'");
}

inline GradientBackend parse_backend(const std::string& s) {
  if (s == "analytic") return GradientBackend::ANALYTIC_CHAIN;
  if (s == "finite_diff") return GradientBackend::FINITE_DIFF;
  if (s == "surrogate") return GradientBackend::SURROGATE;
  throw InvalidArgument("unknown gradient backend '" + s + "'");
}

struct AttackConfig {
  Norm norm = Norm::LINF;
  double epsilon = 8.0 / 255.0;
  int iterations = 200;
  int eot_samples = 5;
  /// Unset: eps/4 for LINF, 2.5 eps / iterations for L2.
  std::optional<double> step_size;
  /// Unset: the defender's value (synchronous attack).
  std::optional<int> attacker_forward_steps;
  std::optional<int> attacker_denoising_steps;
  bool attacker_knows_guidance = true;
  GradientBackend gradient_backend = GradientBackend::ANALYTIC_CHAIN;
  /// Restarts after the first start from a uniform point in the ball.
  int restarts = 1;
  /// Central-difference half width for FINITE_DIFF.
  double fd_step = 1e-5;
  std::uint64_t seed = 0;

  static AttackConfig l2(double eps = 0.5) {
    AttackConfig c;
    c.norm = Norm::L2;
    c.epsilon = eps;
    return c;
  }

  void validate() const {
    require(std::isfinite(epsilon) && epsilon >= 0.0, "AttackConfig: epsilon must be >= 0");
    require(iterations >= 1, "AttackConfig: iterations must be >= 1");
    require(eot_samples >= 1, "AttackConfig: eot_samples must be >= 1");
    require(restarts >= 1, "AttackConfig: restarts must be >= 1");
    if (step_size) require(std::isfinite(*step_size) && *step_size > 0.0, "AttackConfig: step_size must be > 0");
    if (attacker_denoising_steps) require(*attacker_denoising_steps >= 1, "AttackConfig: attacker_denoising_steps must be >= 1");
    require(std::isfinite(fd_step) && fd_step > 0.0, "AttackConfig: fd_step must be > 0");
  }

  double resolved_step() const {
    if (step_size) return *step_size;
    return norm == Norm::LINF ? epsilon / 4.0 : 2.5 * epsilon / iterations;
  }
};

/// Purifier followed by the classifier. Without a defense config the
/// purifier is the identity.
class Pipeline {
 public:
  explicit Pipeline(const ScoreOracle& oracle, std::optional<DefenseConfig> defense = std::nullopt)
      : oracle_(&oracle), defense_(std::move(defense)) {
    if (defense_) defense_->validate(oracle.schedule());
  }

  const ScoreOracle& oracle() const { return *oracle_; }
  const std::optional<DefenseConfig>& defense() const { return defense_; }
  bool is_identity() const { return !defense_; }

  Vec purify(const Vec& x, Rng& rng) const {
    if (!defense_) return x;
    return diffap::purify(*oracle_, oracle_->schedule(), *defense_, x, rng);
  }

 private:
  const ScoreOracle* oracle_;
  std::optional<DefenseConfig> defense_;
};

/// Counts what the attack graph evaluated. Shared across threads.
struct AttackCounters {
  std::atomic<long> chain_evaluations{0};
  std::atomic<long> guidance_evaluations{0};
};

/// The chain the attacker differentiates: the defender's, rebuilt with the
/// attacker's steps; guidance dropped unless the attacker knows it (and
/// always for the surrogate).
inline std::optional<DefenseConfig> attacker_defense(const Pipeline& pipeline, const AttackConfig& cfg) {
  if (pipeline.is_identity()) return std::nullopt;
  DefenseConfig a = *pipeline.defense();
  a.forward_steps = cfg.attacker_forward_steps.value_or(a.forward_steps);
  a.denoising_steps = cfg.attacker_denoising_steps.value_or(a.denoising_steps);
  if (!cfg.attacker_knows_guidance || cfg.gradient_backend == GradientBackend::SURROGATE)
    a.guidance = GuidanceSpec::none();
  a.validate(pipeline.oracle().schedule());
  return a;
}

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

namespace detail {

/// -log p(y | clip(out)) and its gradient with respect to the raw output.
inline LossGrad output_loss(const ClassifierHead& head, const Vec& out, int y, bool with_grad) {
  LossGrad r;
  if (!out.allFinite()) {
    r.loss = std::log(static_cast<double>(head.num_classes()));
    r.grad = Vec::Zero(out.size());
    return r;
  }
  const Vec clipped = clip_unit_box(out);
  const auto ev = head.evaluate(clipped, with_grad);
  r.loss = -ev.log_probs[y];
  if (with_grad) {
    const Vec probs = ev.log_probs.array().exp();
    Vec g = -(ev.class_grads.col(y) - ev.class_grads * probs) / head.temperature();
    for (Eigen::Index j = 0; j < g.size(); ++j)
      if (out[j] <= 0.0 || out[j] >= 1.0) g[j] = 0.0;
    r.grad = std::move(g);
  }
  return r;
}

inline double replica_loss(const ScoreOracle& oracle, const std::optional<DefenseConfig>& chain,
                           const ClassifierHead& head, const Vec& x, int y, const NoiseTape& tape,
                           AttackCounters* counters) {
  if (!chain) return output_loss(head, x, y, false).loss;
  PurifyStats stats;
  const auto trace = run_chain(oracle, *chain, x, tape, false, &stats);
  if (counters) {
    ++counters->chain_evaluations;
    counters->guidance_evaluations += stats.guidance_evaluations;
  }
  return output_loss(head, trace.output, y, false).loss;
}

}  // namespace detail

/// One EOT estimate: mean loss and mean loss gradient over eot_samples
/// replicas. Replica tapes are drawn from `rng` in order, so n replicas
/// equal n consecutive single-replica calls on the same stream.
inline LossGrad eot_loss_gradient(const Pipeline& pipeline, const ClassifierHead& head, const Vec& x,
                                  int y, const AttackConfig& cfg, Rng& rng,
                                  AttackCounters* counters = nullptr) {
  cfg.validate();
  require(x.size() == pipeline.oracle().dim(), "eot_gradient: dimension mismatch");
  require(x.allFinite(), "eot_gradient: non-finite input");
  require(y >= 0 && y < head.num_classes(), "eot_gradient: label out of range");
  const auto chain = attacker_defense(pipeline, cfg);
  const bool surrogate = cfg.gradient_backend == GradientBackend::SURROGATE;
  require(cfg.gradient_backend != GradientBackend::ANALYTIC_CHAIN || !chain ||
              !pipeline.oracle().has_error(),
          "eot_gradient: ANALYTIC_CHAIN needs an exact score (error injection is active)");
  const std::optional<ScoreOracle> exact =
      surrogate && pipeline.oracle().has_error() ? std::optional(pipeline.oracle().exact()) : std::nullopt;
  const ScoreOracle& oracle = exact ? *exact : pipeline.oracle();

  LossGrad total{0.0, Vec::Zero(x.size())};
  for (int r = 0; r < cfg.eot_samples; ++r) {
    if (!chain) {
      const auto lg = detail::output_loss(head, x, y, true);
      total.loss += lg.loss;
      total.grad += lg.grad;
      continue;
    }
    const NoiseTape tape = NoiseTape::draw(chain->denoising_steps, x.size(), rng);
    if (cfg.gradient_backend == GradientBackend::FINITE_DIFF) {
      total.loss += detail::replica_loss(oracle, chain, head, x, y, tape, counters);
      const double h = cfg.fd_step;
      for (Eigen::Index j = 0; j < x.size(); ++j) {
        Vec xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        const double lp = detail::replica_loss(oracle, chain, head, xp, y, tape, counters);
        const double lm = detail::replica_loss(oracle, chain, head, xm, y, tape, counters);
        total.grad[j] += (lp - lm) / (2.0 * h);
      }
      continue;
    }
    PurifyStats stats;
    const auto trace = run_chain(oracle, *chain, x, tape, true, &stats);
    if (counters) {
      ++counters->chain_evaluations;
      counters->guidance_evaluations += stats.guidance_evaluations;
    }
    const auto lg = detail::output_loss(head, trace.output, y, true);
    total.loss += lg.loss;
    if (!trace.diverged) total.grad += chain_vjp(oracle, *chain, x, trace, lg.grad);
  }
  total.loss /= cfg.eot_samples;
  total.grad /= cfg.eot_samples;
  return total;
}

/// Mean gradient of -log p(y | purify(x)) over EOT replicas.
inline Vec eot_gradient(const Pipeline& pipeline, const ClassifierHead& head, const Vec& x, int y,
                        const AttackConfig& cfg, Rng& rng, AttackCounters* counters = nullptr) {
  return eot_loss_gradient(pipeline, head, x, y, cfg, rng, counters).grad;
}

inline double perturbation_norm(Norm norm, const Vec& delta) {
  return norm == Norm::LINF ? delta.lpNorm<Eigen::Infinity>() : delta.norm();
}

/// Projects x onto the eps-ball around x0 intersected with [0,1]^d.
inline Vec project(Norm norm, const Vec& x, const Vec& x0, double eps) {
  Vec delta = x - x0;
  if (norm == Norm::LINF) {
    delta = delta.cwiseMax(-eps).cwiseMin(eps);
  } else {
    const double n = delta.norm();
    if (n > eps) delta *= eps / n;
  }
  return clip_unit_box(x0 + delta);
}

struct AttackResult {
  Vec x_adv;
  double best_loss = -std::numeric_limits<double>::infinity();
  std::vector<double> loss_trace;  // best EOT loss so far, per evaluation
  std::vector<double> raw_losses;  // EOT loss of each iterate
  long chain_evaluations = 0;
  long guidance_evaluations = 0;
  double slack = 0.0;  // epsilon - ||x_adv - x0||
};

/// PGD ascent on the EOT loss. The first start is x0; each iteration takes
/// a sign (LINF) or normalized (L2) step then projects. Returns the iterate
/// with the highest EOT loss, the final iterate included.
inline AttackResult pgd_attack(const Pipeline& pipeline, const ClassifierHead& head, const Vec& x0,
                               int y, const AttackConfig& cfg) {
  cfg.validate();
  require(x0.size() == pipeline.oracle().dim(), "pgd_attack: dimension mismatch");
  require(x0.allFinite() && x0.minCoeff() >= 0.0 && x0.maxCoeff() <= 1.0,
          "pgd_attack: x0 must lie in [0,1]^d");
  AttackResult res;
  res.x_adv = x0;
  AttackCounters counters;
  if (cfg.epsilon == 0.0) return res;
  const double alpha = cfg.resolved_step();
  Rng rng(cfg.seed);

  for (int restart = 0; restart < cfg.restarts; ++restart) {
    Vec x = x0;
    if (restart > 0) {
      Vec u(x0.size());
      for (Eigen::Index j = 0; j < u.size(); ++j) u[j] = 2.0 * rng.uniform() - 1.0;
      if (cfg.norm == Norm::L2) u *= cfg.epsilon * rng.uniform() / std::max(u.norm(), 1e-300);
      else u *= cfg.epsilon;
      x = project(cfg.norm, x0 + u, x0, cfg.epsilon);
    }
    for (int it = 0; it <= cfg.iterations; ++it) {
      const auto lg = eot_loss_gradient(pipeline, head, x, y, cfg, rng, &counters);
      res.raw_losses.push_back(lg.loss);
      if (lg.loss > res.best_loss) {
        res.best_loss = lg.loss;
        res.x_adv = x;
      }
      res.loss_trace.push_back(res.best_loss);
      if (it == cfg.iterations) break;
      Vec step;
      if (cfg.norm == Norm::LINF) {
        step = lg.grad.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
      } else {
        const double n = lg.grad.norm();
        step = n > 0.0 ? Vec(lg.grad / n) : Vec::Zero(x.size());
      }
      x = project(cfg.norm, x + alpha * step, x0, cfg.epsilon);
    }
  }
  res.chain_evaluations = counters.chain_evaluations;
  res.guidance_evaluations = counters.guidance_evaluations;
  res.slack = cfg.epsilon - perturbation_norm(cfg.norm, res.x_adv - x0);
  return res;
}

/// PGD through a chain rebuilt with the attacker's own forward steps; the
/// returned example is meant for the defender's unchanged pipeline.
inline AttackResult asynchronous_attack(const Pipeline& pipeline, const ClassifierHead& head,
                                        const Vec& x0, int y, const AttackConfig& cfg) {
  require(cfg.attacker_forward_steps.has_value(),
          "asynchronous_attack: attacker_forward_steps must be set");
  const int t = *cfg.attacker_forward_steps;
  require(t >= 1 && t <= pipeline.oracle().schedule().T(),
          "asynchronous_attack: attacker_forward_steps must lie in [1, T]");
  return pgd_attack(pipeline, head, x0, y, cfg);
}

}  // namespace diffap
