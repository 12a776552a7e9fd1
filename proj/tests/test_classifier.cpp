#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace diffap;

TEST(Classifier, NormalizedAndGradientMatchesFiniteDifference) {
  const auto g = fixtures::reference_config().build_mixture();
  for (double temp : {1.0, 0.5, 3.0}) {
    const ClassifierHead head(g, temp);
    Rng rng(1);
    for (int n = 0; n < 30; ++n) {
      // points between modes, where the posterior is not saturated
      const Vec x = 0.5 * (g.means()[n % 4] + g.means()[(n + 1) % 4]) + 0.05 * rng.normal_vec(8);
      const Vec lp = head.class_log_probs(x);
      EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-12);
      for (int y = 0; y < 4; ++y) {
        const Vec fd = fixtures::fd_gradient([&](const Vec& v) { return head.class_log_probs(v)[y]; }, x, 1e-6);
        EXPECT_LT((head.class_grad(x, y) - fd).lpNorm<Eigen::Infinity>(), 1e-6 * (1.0 + fd.norm()));
      }
    }
  }
}

TEST(Classifier, TemperatureKeepsArgmax) {
  const auto g = fixtures::small_mixture();
  const ClassifierHead a(g, 1.0), b(g, 0.2), c(g, 5.0);
  Rng rng(2);
  for (int n = 0; n < 500; ++n) {
    const Vec x = fixtures::uniform_vec(rng, 2);
    EXPECT_EQ(a.predict(x), b.predict(x));
    EXPECT_EQ(a.predict(x), c.predict(x));
  }
  EXPECT_THROW(ClassifierHead(g, 0.0), InvalidArgument);
}

TEST(Classifier, BayesPosteriorDirect) {
  const auto g = fixtures::small_mixture();
  const ClassifierHead head(g);
  Vec x(2);
  x << 0.5, 0.5;
  double p[2] = {0, 0};
  for (int i = 0; i < 4; ++i) {
    const auto is = static_cast<std::size_t>(i);
    const double v = g.variances()[is];
    p[g.labels()[is]] += g.weights()[is] / (2 * M_PI * v) * std::exp(-0.5 * (x - g.means()[is]).squaredNorm() / v);
  }
  EXPECT_NEAR(std::exp(head.class_log_probs(x)[0]), p[0] / (p[0] + p[1]), 1e-12);
}

TEST(Classifier, AccuracyCounting) {
  const auto g = fixtures::small_mixture();
  const ClassifierHead head(g);
  Rng rng(3);
  std::vector<Vec> xs;
  std::vector<int> ys;
  int hits = 0;
  for (int n = 0; n < 200; ++n) {
    xs.push_back(fixtures::uniform_vec(rng, 2));
    ys.push_back(n % 2);
    hits += head.predict(xs.back()) == ys.back();
  }
  xs.push_back(Vec::Constant(2, std::nan("")));
  ys.push_back(0);
  EXPECT_EQ(head.predict(xs.back()), -1);
  EXPECT_DOUBLE_EQ(accuracy(head, xs, ys), hits / 201.0);
  EXPECT_THROW(accuracy(head, std::span<const Vec>{}, std::span<const int>{}), InvalidArgument);
  EXPECT_THROW(head.class_grad(xs[0], 2), InvalidArgument);
}

TEST(Classifier, BenchmarkMixtureIsNearlySeparable) {
  const auto& cfg = fixtures::reference_config();
  const auto g = cfg.build_mixture();
  const auto head = cfg.build_head();
  Rng rng(4);
  const int n = 20000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const auto d = g.sample(rng);
    hits += head.predict(d.x) == d.label;
  }
  EXPECT_GT(double(hits) / n, 0.999);
}
