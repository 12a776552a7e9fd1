#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "test_util.hpp"

using namespace diffap;
using fixtures::linear_schedule;

namespace {

DefenseConfig defense(int t, int M, SamplerSpec s, GuidanceMethod g, double R = 2.0) {
  DefenseConfig c;
  c.forward_steps = t;
  c.denoising_steps = M;
  c.sampler = s;
  c.guidance.method = g;
  c.guidance.R = R;
  return c;
}

}  // namespace

TEST(Purifier, SingleStepNearIdentity) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto& g = o.gmm();
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Vec x = g.means()[static_cast<std::size_t>(i % 4)] + 0.05 * rng.normal_vec(8);
    const Vec out = purify(o, o.schedule(), defense(1, 1, SamplerSpec::random(), GuidanceMethod::NONE), x, rng);
    EXPECT_LT((out - clip_unit_box(x)).lpNorm<Eigen::Infinity>(), 0.05);
  }
}

TEST(Purifier, DeterministicGivenStream) {
  const auto o = fixtures::reference_config().build_oracle();
  const Vec x = Vec::Constant(8, 0.3);
  const auto cfg = fixtures::reference_config().defense;
  Rng a(5), b(5), c(6);
  const Vec xa = purify(o, o.schedule(), cfg, x, a);
  EXPECT_EQ(xa, purify(o, o.schedule(), cfg, x, b));
  EXPECT_NE(xa, purify(o, o.schedule(), cfg, x, c));
  EXPECT_GE(xa.minCoeff(), 0.0);
  EXPECT_LE(xa.maxCoeff(), 1.0);
}

TEST(Purifier, GuidedStepCountAndTrajectory) {
  const auto o = fixtures::reference_config().build_oracle();
  for (int M : {1, 5, 10, 13}) {
    for (int k : {1, 2, 3}) {
      auto cfg = defense(1000, M, SamplerSpec::ddpm(), GuidanceMethod::MEDIATOR);
      cfg.guidance.modulus_k = k;
      PurifyStats stats;
      GuidanceDiagnostics diag;
      Trajectory traj;
      Rng rng(2);
      purify(o, o.schedule(), cfg, Vec::Constant(8, 0.5), rng, &stats, &diag, &traj);
      EXPECT_EQ(stats.guided_steps, M / k);
      EXPECT_EQ(static_cast<int>(diag.records.size()), M / k);
      ASSERT_EQ(static_cast<int>(traj.points.size()), M + 1);
      EXPECT_EQ(traj.points.front().t, cfg.subsequence().top());
      EXPECT_EQ(traj.points.back().t, 0);
    }
  }
}

TEST(Purifier, RejectsBadConfigs) {
  const auto o = fixtures::reference_config().build_oracle();
  Rng rng(3);
  const Vec x = Vec::Constant(8, 0.5);
  EXPECT_THROW(purify(o, o.schedule(), defense(5, 10, SamplerSpec::ddim(), GuidanceMethod::NONE), x, rng),
               InvalidArgument);
  EXPECT_THROW(purify(o, o.schedule(), defense(1001, 10, SamplerSpec::ddim(), GuidanceMethod::NONE), x, rng),
               InvalidArgument);
  const auto other = build_linear_schedule(1000, 1e-4, 0.03);
  EXPECT_THROW(purify(o, other, defense(100, 10, SamplerSpec::ddim(), GuidanceMethod::NONE), x, rng),
               InvalidArgument);
  EXPECT_THROW(purify(o, o.schedule(), defense(100, 10, SamplerSpec::ddim(), GuidanceMethod::NONE), Vec::Zero(3), rng),
               InvalidArgument);
}

TEST(Purifier, ReverseModeMatchesFiniteDifference) {
  const auto& ref = fixtures::reference_config();
  const ScoreOracle small(fixtures::small_mixture(), linear_schedule());
  const auto big = ref.build_oracle();
  for (const ScoreOracle* o : {&small, &big}) {
    const auto d = o->dim();
    for (auto g : {GuidanceMethod::NONE, GuidanceMethod::MEDIATOR, GuidanceMethod::GDMP, GuidanceMethod::DPS}) {
      for (const auto& s : {SamplerSpec::ddim(), SamplerSpec::ddpm(), SamplerSpec::random()}) {
        auto cfg = defense(200, 3, s, g, 0.2 * static_cast<double>(d));
        cfg.guidance.modulus_k = 1;
        Rng rng(4);
        const Vec x = fixtures::uniform_vec(rng, d, 0.2, 0.8);
        const auto tape = NoiseTape::draw(cfg.denoising_steps, d, rng);  // stride 66, top 198
        const auto trace = run_chain(*o, cfg, x, tape, true);
        const Vec w = rng.normal_vec(d);
        const Vec got = chain_vjp(*o, cfg, x, trace, w);
        const Vec fd = fixtures::fd_gradient(
            [&](const Vec& y) { return w.dot(run_chain(*o, cfg, y, tape, false).output); }, x, 1e-6);
        EXPECT_LT(fixtures::rel_err(got, fd), 1e-5) << to_string(g) << "/" << to_string(s.kind) << " d=" << d;
      }
    }
  }
}

TEST(Purifier, BatchMatchesSingleCallsAndIgnoresOrder) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto cfg = fixtures::reference_config().defense;
  Rng rng(5);
  std::vector<Vec> xs;
  for (int i = 0; i < 6; ++i) xs.push_back(fixtures::uniform_vec(rng, 8));
  std::vector<std::uint64_t> ids = {10, 11, 12, 13, 14, 15};
  const auto out = purify_batch(o, o.schedule(), cfg, xs, 99, ids, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Rng r(purify_stream_seed(99, ids[i]));
    EXPECT_EQ(out[i], purify(o, o.schedule(), cfg, xs[i], r));
  }
  std::vector<std::size_t> perm(xs.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::vector<Vec> xs2;
  std::vector<std::uint64_t> ids2;
  for (auto p : perm) {
    xs2.push_back(xs[p]);
    ids2.push_back(ids[p]);
  }
  const auto out2 = purify_batch(o, o.schedule(), cfg, xs2, 99, ids2, 3);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(out2[i], out[perm[i]]);
  const std::vector<Vec> one = {xs[0]};
  Rng r0(purify_stream_seed(99, 0));
  EXPECT_EQ(purify_batch(o, o.schedule(), cfg, one, 99)[0], purify(o, o.schedule(), cfg, xs[0], r0));
  EXPECT_THROW(purify_batch(o, o.schedule(), cfg, std::span<const Vec>{}, 1), InvalidArgument);
}

TEST(Purifier, UnguidedFullNoiseForgetsInput) {
  const auto o = fixtures::reference_config().build_oracle();
  const auto cfg = defense(1000, 10, SamplerSpec::random(), GuidanceMethod::NONE);
  Rng rng(6);
  for (int n = 0; n < 10; ++n) {
    const auto tape = NoiseTape::draw(10, 8, rng);
    const Vec a = run_chain(o, cfg, Vec::Zero(8), tape, false).output;
    const Vec b = run_chain(o, cfg, Vec::Ones(8), tape, false).output;
    EXPECT_LT((a - b).norm(), 0.05);
  }
}

TEST(Purifier, StrongMediatorKeepsLabel) {
  const auto& ref = fixtures::reference_config();
  const auto o = ref.build_oracle();
  const auto head = ref.build_head();
  auto cfg = defense(1000, 100, SamplerSpec::random(), GuidanceMethod::MEDIATOR, 4.0);
  Rng rng(7);
  int hits = 0;
  const int n = 100;
  for (int i = 0; i < n; ++i) {
    const auto d = o.gmm().sample(rng);
    hits += head.predict(purify(o, o.schedule(), cfg, clip_unit_box(d.x), rng)) == d.label;
  }
  EXPECT_GE(hits, 95);
}

TEST(Purifier, ScoreErrorUsesTape) {
  const auto& ref = fixtures::reference_config();
  const ScoreOracle noisy(ref.build_mixture(), ref.build_schedule(), ScoreErrorSpec{0.2, 3});
  const auto o = ref.build_oracle();
  const auto cfg = defense(300, 5, SamplerSpec::ddim(), GuidanceMethod::NONE);
  Rng rng(8);
  auto tape = NoiseTape::draw(5, 8, rng);
  const Vec x = Vec::Constant(8, 0.4);
  const Vec a = run_chain(noisy, cfg, x, tape, false).output;
  EXPECT_EQ(a, run_chain(noisy, cfg, x, tape, false).output);
  EXPECT_GT((a - run_chain(o, cfg, x, tape, false).output).norm(), 1e-6);
  for (auto& v : tape.score_noise) v.setZero();
  EXPECT_EQ(run_chain(noisy, cfg, x, tape, false).output, run_chain(o, cfg, x, tape, false).output);
}
