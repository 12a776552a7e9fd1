#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "diffap/guidance.hpp"
#include "diffap/parallel.hpp"
#include "diffap/rng.hpp"
#include "diffap/sampler.hpp"
#include "diffap/schedule.hpp"
#include "diffap/score.hpp"

namespace diffap {

/// Purification settings: noise the input to step t*, then denoise over M
/// steps of the chosen sampler with the chosen guidance.
struct DefenseConfig {
  int forward_steps = 1000;
  int denoising_steps = 10;
  SamplerSpec sampler = SamplerSpec::random();
  GuidanceSpec guidance;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& schedule) const {
    require(forward_steps >= 1 && forward_steps <= schedule.T(),
            "DefenseConfig: forward_steps must lie in [1, T]");
    require(denoising_steps >= 1, "DefenseConfig: denoising_steps must be >= 1");
    require(denoising_steps <= forward_steps,
            "DefenseConfig: denoising_steps (M) exceeds forward_steps (t*)");
    sampler.validate();
    guidance.validate();
  }

  TimestepSubsequence subsequence() const { return make_subsequence(forward_steps, denoising_steps); }
};

/// Every random draw one purification consumes, laid out up front so a
/// chain can be replayed exactly (finite differences with common random
/// numbers, reverse-mode gradients).
struct NoiseTape {
  Vec initial;                   // forward noising to x_{t*}
  std::vector<Vec> z;            // fresh sampler noise, per transition
  std::vector<Vec> z2;           // GDMP guide noise, per transition
  std::vector<Vec> score_noise;  // model-error perturbation, per transition

  /// Draw order is fixed regardless of sampler or guidance so runs that
  /// differ only in those settings see identical noise.
  static NoiseTape draw(int M, Eigen::Index d, Rng& rng) {
    NoiseTape tape;
    tape.initial = rng.normal_vec(d);
    tape.z.reserve(static_cast<std::size_t>(M));
    tape.z2.reserve(static_cast<std::size_t>(M));
    tape.score_noise.reserve(static_cast<std::size_t>(M));
    for (int p = 0; p < M; ++p) {
      tape.z.push_back(rng.normal_vec(d));
      tape.z2.push_back(rng.normal_vec(d));
      tape.score_noise.push_back(rng.normal_vec(d));
    }
    return tape;
  }
};

struct PurifyStats {
  int guided_steps = 0;
  int guidance_evaluations = 0;
  bool diverged = false;
};

/// Forward pass of one purification with everything the reverse pass needs.
struct ChainTrace {
  struct StepRecord {
    Step t = 0;
    Step t_prev = 0;
    double k = 0.0;
    bool guided = false;
    Vec x_in;         // state at t before any GDMP guidance
    Vec gdmp_target;  // forward-noised guide (GDMP only)
    Vec x;            // state the noise prediction is evaluated at
    ScoreEval score;
    Vec x0_tilde;     // mediator before guidance
    Vec x0_hat;       // mediator after guidance
  };
  std::vector<StepRecord> steps;
  Vec output;  // x_0 before the final clip
  bool diverged = false;
};

namespace detail {

inline void check_schedule(const ScoreOracle& oracle, const NoiseSchedule& schedule) {
  require(schedule.T() == oracle.schedule().T() &&
              schedule.alpha_bar(schedule.T()) == oracle.schedule().alpha_bar(schedule.T()),
          "purify: schedule differs from the score oracle's schedule");
}

inline Vec nan_vec(Eigen::Index d) { return Vec::Constant(d, std::numeric_limits<double>::quiet_NaN()); }

}  // namespace detail

/// Runs the guided reverse chain on a fixed noise tape. Deterministic.
inline ChainTrace run_chain(const ScoreOracle& oracle, const DefenseConfig& cfg,
                            const Vec& x_input, const NoiseTape& tape, bool keep_records,
                            PurifyStats* stats = nullptr, GuidanceDiagnostics* diag = nullptr,
                            Trajectory* trajectory = nullptr) {
  const NoiseSchedule& sch = oracle.schedule();
  cfg.validate(sch);
  require(x_input.size() == oracle.dim(), "purify: dimension mismatch");
  require(x_input.allFinite(), "purify: non-finite input");
  const auto sub = cfg.subsequence();
  const int M = sub.M;
  require(static_cast<int>(tape.z.size()) >= M && tape.initial.size() == x_input.size(),
          "purify: noise tape too short");

  const GuidanceSpec& gs = cfg.guidance;
  const bool guiding = gs.method != GuidanceMethod::NONE;
  const double R = guiding ? gs.resolved_R(x_input.size()) : 0.0;
  const double err = oracle.error_scale();

  ChainTrace trace;
  if (keep_records) trace.steps.reserve(static_cast<std::size_t>(M));
  Vec x = forward_noise(sch, x_input, sub.top(), tape.initial);

  for (int p = 0; p < M; ++p) {
    const auto ps = static_cast<std::size_t>(p);
    const int i = M - p;
    const Step t = sub.steps[ps];
    const Step t_prev = sub.steps[ps + 1];
    if (!x.allFinite()) {
      trace.diverged = true;
      break;
    }
    ChainTrace::StepRecord rec;
    rec.t = t;
    rec.t_prev = t_prev;
    rec.k = cfg.sampler.k_at(sch, ps, t, t_prev);
    rec.guided = guiding && should_guide(i, gs.modulus_k);
    const double ab = sch.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double c = std::sqrt(1.0 - ab);
    if (rec.guided) {
      if (stats) {
        ++stats->guided_steps;
        ++stats->guidance_evaluations;
      }
    }

    if (keep_records) rec.x_in = x;
    if (rec.guided && gs.method == GuidanceMethod::GDMP) {
      const Vec target = forward_noise(sch, x_input, t, tape.z2[ps]);
      const Vec move = -R * distance_gradient(gs.distance, x, target);
      if (diag) {
        // Noise the score model attributes to x_t (z1) against the guide's z2.
        const Vec z1 = -c * oracle.score(x, t);
        diag->records.push_back({t, move, c * (z1 - tape.z2[ps]), false});
      }
      x += move;
      if (keep_records) rec.gdmp_target = target;
      if (!x.allFinite()) {
        trace.diverged = true;
        break;
      }
    }

    ScoreEval ev = oracle.evaluate(x, t);
    Vec s = ev.score;
    if (err > 0.0) s += err * tape.score_noise[ps];
    const Vec eps = -c * s;
    const Vec x0_tilde = (x - c * eps) / a;
    Vec x0_hat = x0_tilde;
    if (rec.guided && gs.method == GuidanceMethod::MEDIATOR) {
      const Vec move = -R * distance_gradient(gs.distance, x0_tilde, x_input);
      if (diag) diag->records.push_back({t, move, Vec::Zero(x.size()), false});
      x0_hat += move;
    }
    if (trajectory) trajectory->points.push_back({t, x, x0_hat});

    Vec next = renoise(sch, x0_hat, t_prev, eps, rec.k, tape.z[ps]);
    if (rec.guided && gs.method == GuidanceMethod::DPS) {
      next = dps_guide(sch, next, x0_tilde, x_input, t, gs, diag);
    }
    if (keep_records) {
      rec.x = x;
      rec.score = std::move(ev);
      rec.x0_tilde = x0_tilde;
      rec.x0_hat = x0_hat;
      trace.steps.push_back(std::move(rec));
    }
    x = std::move(next);
  }
  if (!x.allFinite()) trace.diverged = true;
  trace.output = trace.diverged ? detail::nan_vec(x_input.size()) : x;
  if (trajectory) trajectory->points.push_back({0, trace.output, trace.output});
  if (stats && trace.diverged) stats->diverged = true;
  return trace;
}

/// Reverse-mode derivative of the raw chain output with respect to the
/// purifier input: returns J^T w for J = d output / d x_input.
/// Uses Hessian-vector products of the exact log-density; the score
/// perturbation is constant on a fixed tape and contributes nothing.
inline Vec chain_vjp(const ScoreOracle& oracle, const DefenseConfig& cfg, const Vec& x_input,
                     const ChainTrace& trace, const Vec& w) {
  const NoiseSchedule& sch = oracle.schedule();
  require(!trace.diverged, "chain_vjp: chain diverged");
  require(static_cast<int>(trace.steps.size()) == cfg.denoising_steps,
          "chain_vjp: trace was recorded without step records");
  const GuidanceSpec& gs = cfg.guidance;
  const double R = gs.method != GuidanceMethod::NONE ? gs.resolved_R(x_input.size()) : 0.0;

  Vec lambda = w;  // adjoint of the current state
  Vec gamma = Vec::Zero(x_input.size());  // adjoint of x_input
  for (auto it = trace.steps.rbegin(); it != trace.steps.rend(); ++it) {
    const auto& rec = *it;
    const double ab = sch.alpha_bar(rec.t);
    const double a = std::sqrt(ab);
    const double c = std::sqrt(1.0 - ab);
    const double ab_p = sch.alpha_bar(rec.t_prev);
    const double c_p = std::sqrt(1.0 - ab_p);

    Vec lam_x0_tilde = Vec::Zero(lambda.size());
    if (rec.guided && gs.method == GuidanceMethod::DPS) {
      const Vec v = distance_gradient_vjp(gs.distance, rec.x0_tilde, x_input, lambda);
      lam_x0_tilde -= (R / a) * v;
      gamma += (R / a) * v;
    }
    const Vec lam_x0_hat = std::sqrt(ab_p) * lambda;
    const Vec lam_eps = (rec.k < 1.0 ? std::sqrt(1.0 - rec.k) * c_p : 0.0) * lambda;
    if (rec.guided && gs.method == GuidanceMethod::MEDIATOR) {
      const Vec v = distance_gradient_vjp(gs.distance, rec.x0_tilde, x_input, lam_x0_hat);
      lam_x0_tilde += lam_x0_hat - R * v;
      gamma += R * v;
    } else {
      lam_x0_tilde += lam_x0_hat;
    }
    // x0_tilde = (x + c^2 s(x)) / a,  eps = -c s(x)
    Vec lam_x = lam_x0_tilde / a + rec.score.hvp((c * c / a) * lam_x0_tilde - c * lam_eps);
    if (rec.guided && gs.method == GuidanceMethod::GDMP) {
      const Vec v = distance_gradient_vjp(gs.distance, rec.x_in, rec.gdmp_target, lam_x);
      gamma += R * a * v;
      lam_x -= R * v;
    }
    lambda = std::move(lam_x);
  }
  gamma += std::sqrt(sch.alpha_bar(cfg.subsequence().top())) * lambda;
  return gamma;
}

/// Purifies one input, drawing its noise tape from `rng`. Output is clipped
/// to [0,1]^d; a diverged chain yields NaNs.
inline Vec purify(const ScoreOracle& oracle, const NoiseSchedule& schedule,
                  const DefenseConfig& cfg, const Vec& x_input, Rng& rng,
                  PurifyStats* stats = nullptr, GuidanceDiagnostics* diag = nullptr,
                  Trajectory* trajectory = nullptr) {
  detail::check_schedule(oracle, schedule);
  cfg.validate(schedule);
  require(x_input.size() == oracle.dim(), "purify: dimension mismatch");
  const NoiseTape tape = NoiseTape::draw(cfg.denoising_steps, x_input.size(), rng);
  const ChainTrace trace = run_chain(oracle, cfg, x_input, tape, false, stats, diag, trajectory);
  if (trace.diverged) return trace.output;
  return clip_unit_box(trace.output);
}

/// Stream for element `id` of a batch purified under `base_seed`.
inline std::uint64_t purify_stream_seed(std::uint64_t base_seed, std::uint64_t id) {
  return derive_seed(base_seed, {id});
}

/// Purifies each input with its own stream derived from (base_seed, id).
/// `ids` defaults to positions; pass stable per-item ids to make results
/// independent of batch order.
inline std::vector<Vec> purify_batch(const ScoreOracle& oracle, const NoiseSchedule& schedule,
                                     const DefenseConfig& cfg, std::span<const Vec> inputs,
                                     std::uint64_t base_seed,
                                     std::span<const std::uint64_t> ids = {},
                                     unsigned threads = 0) {
  require(!inputs.empty(), "purify_batch: empty batch");
  require(ids.empty() || ids.size() == inputs.size(), "purify_batch: ids/inputs length mismatch");
  detail::check_schedule(oracle, schedule);
  cfg.validate(schedule);
  std::vector<Vec> out(inputs.size());
  parallel_for(
      inputs.size(),
      [&](std::size_t i) {
        Rng rng(purify_stream_seed(base_seed, ids.empty() ? i : ids[i]));
        out[i] = purify(oracle, schedule, cfg, inputs[i], rng);
      },
      threads);
  return out;
}

}  // namespace diffap
