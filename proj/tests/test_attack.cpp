#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace diffap;
using fixtures::linear_schedule;

namespace {

DefenseConfig defense(int t, int M, SamplerSpec s, GuidanceMethod g, double R) {
  DefenseConfig c;
  c.forward_steps = t;
  c.denoising_steps = M;
  c.sampler = s;
  c.guidance.method = g;
  c.guidance.R = R;
  c.guidance.modulus_k = 1;
  return c;
}

AttackConfig quick(double eps, int iters, int eot = 1) {
  AttackConfig a;
  a.epsilon = eps;
  a.iterations = iters;
  a.eot_samples = eot;
  a.seed = 3;
  return a;
}

}  // namespace

TEST(Attack, AnalyticGradientMatchesFiniteDifference) {
  const ScoreOracle o(fixtures::small_mixture(), linear_schedule());
  const ClassifierHead head(o.gmm());
  for (auto g : {GuidanceMethod::NONE, GuidanceMethod::MEDIATOR, GuidanceMethod::GDMP, GuidanceMethod::DPS}) {
    for (const auto& s : {SamplerSpec::ddim(), SamplerSpec::random()}) {
      const Pipeline p(o, defense(150, 5, s, g, 0.3));
      auto cfg = quick(0.03, 1, 3);
      Rng init(1);
      for (int n = 0; n < 3; ++n) {
        const Vec x = fixtures::uniform_vec(init, 2, 0.3, 0.7);
        Rng r1(10 + n), r2(10 + n);
        cfg.gradient_backend = GradientBackend::ANALYTIC_CHAIN;
        const auto an = eot_loss_gradient(p, head, x, n % 2, cfg, r1);
        cfg.gradient_backend = GradientBackend::FINITE_DIFF;
        const auto fd = eot_loss_gradient(p, head, x, n % 2, cfg, r2);
        EXPECT_NEAR(an.loss, fd.loss, 1e-12);
        EXPECT_LT(fixtures::rel_err(an.grad, fd.grad), 1e-4) << to_string(g) << "/" << to_string(s.kind);
      }
    }
  }
}

TEST(Attack, IdentityPipelineGivesClassifierGradient) {
  const ScoreOracle o(fixtures::small_mixture(), linear_schedule());
  const ClassifierHead head(o.gmm());
  const Pipeline p(o);
  Rng rng(2);
  Vec x(2);
  x << 0.45, 0.5;
  EXPECT_LT((eot_gradient(p, head, x, 1, quick(0.1, 1, 4), rng) + head.class_grad(x, 1)).norm(), 1e-12);
}

TEST(Attack, EotAveragesConsecutiveReplicas) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto head = fixtures::reference_config().build_head();
  const Pipeline p(o, defense(200, 4, SamplerSpec::random(), GuidanceMethod::MEDIATOR, 2.0));
  const Vec x = Vec::Constant(8, 0.45);
  Rng a(4), b(4);
  const auto many = eot_loss_gradient(p, head, x, 2, quick(0.1, 1, 3), a);
  LossGrad sum{0.0, Vec::Zero(8)};
  for (int r = 0; r < 3; ++r) {
    const auto one = eot_loss_gradient(p, head, x, 2, quick(0.1, 1, 1), b);
    sum.loss += one.loss / 3.0;
    sum.grad += one.grad / 3.0;
  }
  EXPECT_NEAR(many.loss, sum.loss, 1e-12);
  EXPECT_LT((many.grad - sum.grad).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(Attack, ZeroBudgetReturnsInput) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto head = fixtures::reference_config().build_head();
  const Pipeline p(o, fixtures::reference_config().defense);
  const Vec x = Vec::Constant(8, 0.2);
  const auto res = pgd_attack(p, head, x, 0, quick(0.0, 10));
  EXPECT_EQ(res.x_adv, x);
  EXPECT_EQ(res.chain_evaluations, 0);
}

TEST(Attack, FindsGridMaximumInTwoDimensions) {
  const ScoreOracle o(fixtures::small_mixture(), linear_schedule());
  const ClassifierHead head(o.gmm());
  const Pipeline p(o);
  Vec x0(2);
  x0 << 0.45, 0.55;
  for (double eps : {0.05, 0.15}) {
    for (int y : {0, 1}) {
      auto cfg = quick(eps, 200);
      cfg.step_size = eps / 20.0;
      const auto res = pgd_attack(p, head, x0, y, cfg);
      double best = -1e300;
      const int n = 400;
      for (int i = 0; i <= n; ++i)
        for (int j = 0; j <= n; ++j) {
          Vec v(2);
          v << x0[0] - eps + 2.0 * eps * i / n, x0[1] - eps + 2.0 * eps * j / n;
          best = std::max(best, -head.class_log_probs(clip_unit_box(v))[y]);
        }
      EXPECT_GE(res.best_loss, best - 1e-3 * std::max(1.0, std::abs(best))) << eps << " " << y;
      EXPECT_LE(res.best_loss, best + 1e-9);
    }
  }
}

TEST(Attack, SingleStepIsFgsm) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto head = fixtures::reference_config().build_head();
  const Pipeline p(o);
  const Vec x0 = 0.5 * (o.gmm().means()[0] + o.gmm().means()[1]);
  auto cfg = quick(0.05, 1);
  cfg.step_size = 0.05;
  const auto res = pgd_attack(p, head, x0, 0, cfg);
  const Vec g = -head.class_grad(x0, 0);
  const Vec want = project(Norm::LINF, x0 + 0.05 * g.unaryExpr([](double v) { return double((v > 0) - (v < 0)); }), x0, 0.05);
  EXPECT_LT((res.x_adv - want).lpNorm<Eigen::Infinity>(), 1e-15);
  ASSERT_EQ(res.raw_losses.size(), 2u);
  EXPECT_GT(res.raw_losses[1], res.raw_losses[0]);
}

TEST(Attack, RespectsBudgetAndBox) {
  const auto& ref = fixtures::reference_config();
  const auto o = ref.build_oracle();
  const auto head = ref.build_head();
  const Pipeline p(o, defense(200, 4, SamplerSpec::random(), GuidanceMethod::MEDIATOR, 2.0));
  Rng rng(6);
  for (auto norm : {Norm::LINF, Norm::L2}) {
    for (int n = 0; n < 4; ++n) {
      const auto d = o.gmm().sample(rng);
      const Vec x0 = clip_unit_box(d.x);
      auto cfg = quick(norm == Norm::LINF ? 0.05 : 0.2, 8, 2);
      cfg.norm = norm;
      cfg.restarts = 2;
      const auto res = pgd_attack(p, head, x0, d.label, cfg);
      EXPECT_LE(perturbation_norm(norm, res.x_adv - x0), cfg.epsilon + 1e-9);
      EXPECT_GE(res.x_adv.minCoeff(), 0.0);
      EXPECT_LE(res.x_adv.maxCoeff(), 1.0);
      EXPECT_GE(res.slack, -1e-9);
      ASSERT_EQ(res.loss_trace.size(), 18u);
      for (std::size_t i = 1; i < res.loss_trace.size(); ++i) EXPECT_GE(res.loss_trace[i], res.loss_trace[i - 1]);
      EXPECT_EQ(res.best_loss, *std::max_element(res.raw_losses.begin(), res.raw_losses.end()));
    }
  }
}

TEST(Attack, Projection) {
  Rng rng(7);
  for (int n = 0; n < 100; ++n) {
    const Vec x0 = fixtures::uniform_vec(rng, 5);
    const Vec x = x0 + rng.normal_vec(5);
    const Vec l2 = project(Norm::L2, x, x0, 0.3);
    const Vec li = project(Norm::LINF, x, x0, 0.1);
    EXPECT_LE((l2 - x0).norm(), 0.3 + 1e-12);
    EXPECT_LE((li - x0).lpNorm<Eigen::Infinity>(), 0.1 + 1e-12);
    EXPECT_GE(std::min(l2.minCoeff(), li.minCoeff()), 0.0);
    EXPECT_LE(std::max(l2.maxCoeff(), li.maxCoeff()), 1.0);
    const Vec inside = clip_unit_box(x0 + 0.01 * rng.normal_vec(5).cwiseSign());
    EXPECT_EQ(project(Norm::LINF, inside, x0, 0.1), inside);
  }
}

TEST(Attack, GuidanceCounterTracksKnowledge) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto head = fixtures::reference_config().build_head();
  auto d = defense(200, 4, SamplerSpec::random(), GuidanceMethod::MEDIATOR, 2.0);
  d.guidance.modulus_k = 2;
  const Pipeline p(o, d);
  const Vec x0 = Vec::Constant(8, 0.5);
  auto cfg = quick(0.03, 3, 2);
  const auto known = pgd_attack(p, head, x0, 1, cfg);
  EXPECT_EQ(known.chain_evaluations, 8);
  EXPECT_EQ(known.guidance_evaluations, 16);
  cfg.attacker_knows_guidance = false;
  EXPECT_EQ(pgd_attack(p, head, x0, 1, cfg).guidance_evaluations, 0);
  cfg.attacker_knows_guidance = true;
  cfg.gradient_backend = GradientBackend::SURROGATE;
  EXPECT_EQ(pgd_attack(p, head, x0, 1, cfg).guidance_evaluations, 0);
}

TEST(Attack, AsynchronousWithDefenderStepsEqualsSynchronous) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto head = fixtures::reference_config().build_head();
  const Pipeline p(o, defense(300, 5, SamplerSpec::ddpm(), GuidanceMethod::MEDIATOR, 2.0));
  const Vec x0 = Vec::Constant(8, 0.6);
  auto cfg = quick(0.03, 5, 2);
  const auto sync = pgd_attack(p, head, x0, 3, cfg);
  EXPECT_THROW(asynchronous_attack(p, head, x0, 3, cfg), InvalidArgument);
  cfg.attacker_forward_steps = 300;
  const auto asy = asynchronous_attack(p, head, x0, 3, cfg);
  EXPECT_EQ(sync.x_adv, asy.x_adv);
  EXPECT_EQ(sync.raw_losses, asy.raw_losses);
  cfg.attacker_forward_steps = 100;
  EXPECT_NE(asynchronous_attack(p, head, x0, 3, cfg).raw_losses, sync.raw_losses);
  cfg.attacker_forward_steps = 0;
  EXPECT_THROW(asynchronous_attack(p, head, x0, 3, cfg), InvalidArgument);
}

TEST(Attack, BackendRules) {
  const auto& ref = fixtures::reference_config();
  const ScoreOracle noisy(ref.build_mixture(), ref.build_schedule(), ScoreErrorSpec{0.1, 1});
  const auto head = ref.build_head();
  const Pipeline p(noisy, defense(100, 3, SamplerSpec::ddim(), GuidanceMethod::NONE, 2.0));
  const Vec x = Vec::Constant(8, 0.5);
  Rng rng(8);
  auto cfg = quick(0.03, 1);
  EXPECT_THROW(eot_gradient(p, head, x, 0, cfg, rng), InvalidArgument);
  cfg.gradient_backend = GradientBackend::FINITE_DIFF;
  EXPECT_TRUE(eot_gradient(p, head, x, 0, cfg, rng).allFinite());
  cfg.gradient_backend = GradientBackend::SURROGATE;
  EXPECT_TRUE(eot_gradient(p, head, x, 0, cfg, rng).allFinite());
  EXPECT_THROW(quick(-0.1, 1).validate(), InvalidArgument);
  EXPECT_THROW(quick(0.1, 0).validate(), InvalidArgument);
  EXPECT_EQ(parse_norm("l2"), Norm::L2);
  EXPECT_EQ(parse_backend(to_string(GradientBackend::FINITE_DIFF)), GradientBackend::FINITE_DIFF);
  EXPECT_THROW(parse_backend("adjoint"), InvalidArgument);
  EXPECT_NEAR(quick(0.08, 10).resolved_step(), 0.02, 1e-15);
  EXPECT_NEAR(AttackConfig::l2(0.5).resolved_step(), 2.5 * 0.5 / 200, 1e-15);
}
