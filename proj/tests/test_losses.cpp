#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "cmssl/losses.hpp"
#include "cmssl/trainer.hpp"

namespace {

using namespace cmssl;

constexpr double kTol = 1e-6;

Tensor<double> matrix(int rows, int cols, std::initializer_list<double> values) {
  Tensor<double> t(rows, cols);
  std::size_t i = 0;
  for (double v : values) t[i++] = v;
  return t;
}

Tensor<double> random_probs(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1.5);
  Tensor<double> logits(rows, cols);
  for (auto& v : logits.vec()) v = d(rng);
  return softmax_rows(logits);
}

// Central differences of f at x, written into a vector.
template <class F>
std::vector<double> numeric_grad(std::vector<double>& x, F f, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return worst;
}

// ---------------------------------------------------------------- supervised ce

TEST(SupervisedCe, UniformTenClasses) {
  Tensor<double> p(3, 10, 1, 1, 0.1);
  const std::vector<int> y{0, 4, 9};
  EXPECT_NEAR(supervised_ce(p, y), std::log(10.0), kTol);
}

TEST(SupervisedCe, PerfectPrediction) {
  const auto p = matrix(2, 3, {1, 0, 0, 0, 0, 1});
  EXPECT_NEAR(supervised_ce(p, std::vector<int>{0, 2}), 0.0, kTol);
}

TEST(SupervisedCe, TwoSamplesHandArithmetic) {
  const auto p = matrix(2, 2, {0.5, 0.5, 0.75, 0.25});
  const std::vector<int> y{0, 1};
  double brute = 0;
  for (int i = 0; i < 2; ++i) brute -= std::log(p.at(i, y[i]));
  brute /= 2;
  EXPECT_NEAR(brute, 1.039721, kTol);
  EXPECT_NEAR(supervised_ce(p, y), brute, kTol);
}

TEST(SupervisedCe, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Tensor<double> p = random_probs(4, 5, rng);
  const std::vector<int> y{1, 0, 4, 2};
  Tensor<double> d;
  supervised_ce(p, y, &d);
  const auto num = numeric_grad(p.vec(), [&] { return supervised_ce(p, y); });
  EXPECT_LE(max_rel_err(d.vec(), num, 1e-6), 1e-6);
}

TEST(SupervisedCe, RejectsBadLabels) {
  Tensor<double> p(1, 3, 1, 1, 1.0 / 3);
  EXPECT_THROW(supervised_ce(p, std::vector<int>{3}), InputError);
  EXPECT_THROW(supervised_ce(p, std::vector<int>{0, 1}), InputError);
}

// ---------------------------------------------------------------- consistency

TEST(ConsistencyKl, IdenticalDistributions) {
  std::mt19937_64 rng(2);
  const auto p = random_probs(6, 4, rng);
  EXPECT_NEAR(consistency_kl(p, p), 0.0, kTol);
}

TEST(ConsistencyKl, OneHotAgainstUniform) {
  const auto w = matrix(1, 2, {1, 0});
  const auto s = matrix(1, 2, {0.5, 0.5});
  const double direct = 1.0 * std::log(1.0 / 0.5);  // 0 * ln 0 terms vanish
  EXPECT_NEAR(direct, 0.693147, kTol);
  EXPECT_NEAR(consistency_kl(w, s), direct, kTol);
}

TEST(ConsistencyKl, NonNegative) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto w = random_probs(3, 5, rng), s = random_probs(3, 5, rng);
    EXPECT_GE(consistency_kl(w, s), -1e-7);
  }
}

TEST(ConsistencyKl, GradientOnlyThroughStrongView) {
  std::mt19937_64 rng(4);
  const auto w = random_probs(3, 4, rng);
  Tensor<double> s = random_probs(3, 4, rng);
  Tensor<double> d;
  consistency_kl(w, s, &d);
  ASSERT_TRUE(d.same_shape(s));
  const auto num = numeric_grad(s.vec(), [&] { return consistency_kl(w, s); });
  EXPECT_LE(max_rel_err(d.vec(), num, 1e-6), 1e-6);
}

// ---------------------------------------------------------------- rotation

TEST(RotationCe, Uniform) {
  Tensor<double> q(8, 4, 1, 1, 0.25);
  const std::vector<int> r{0, 1, 2, 3, 0, 1, 2, 3};
  EXPECT_NEAR(rotation_ce(q, r), std::log(4.0), kTol);
}

TEST(RotationCe, Perfect) {
  Tensor<double> q(4, 4);
  for (int j = 0; j < 4; ++j) q.at(j, j) = 1;
  EXPECT_NEAR(rotation_ce(q, std::vector<int>{0, 1, 2, 3}), 0.0, kTol);
}

TEST(RotationCe, OneImageHandArithmetic) {
  const std::vector<double> diag{0.5, 0.5, 0.25, 0.25};
  Tensor<double> q(4, 4);
  for (int j = 0; j < 4; ++j) {
    for (int c = 0; c < 4; ++c) q.at(j, c) = (1 - diag[j]) / 3;
    q.at(j, j) = diag[j];
  }
  double brute = 0;
  for (int j = 0; j < 4; ++j) brute -= std::log(q.at(j, j));
  brute /= 4;
  EXPECT_NEAR(brute, 1.039721, kTol);
  EXPECT_NEAR(rotation_ce(q, std::vector<int>{0, 1, 2, 3}), brute, kTol);
}

TEST(RotationCe, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor<double> q = random_probs(8, 4, rng);
  const std::vector<int> r{0, 1, 2, 3, 0, 1, 2, 3};
  Tensor<double> d;
  rotation_ce(q, r, &d);
  const auto num = numeric_grad(q.vec(), [&] { return rotation_ce(q, r); });
  EXPECT_LE(max_rel_err(d.vec(), num, 1e-6), 1e-6);
}

TEST(RotationCe, RequiresGroupsOfFour) {
  Tensor<double> q(3, 4, 1, 1, 0.25);
  EXPECT_THROW(rotation_ce(q, std::vector<int>{0, 1, 2}), InputError);
}

// ---------------------------------------------------------------- negatives

TEST(HardestNegative, DirectArgmax) {
  const std::vector<double> p{0.5, 0.3, 0.2};
  EXPECT_EQ(mine_hardest_negative<double>(p, 0), 1);
}

TEST(HardestNegative, TieBreaksLow) {
  const std::vector<double> p{0.9, 0.05, 0.05};
  EXPECT_EQ(mine_hardest_negative<double>(p, 0), 1);
}

TEST(HardestNegative, BruteForceScan) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    const int K = 2 + trial % 9;
    const auto p = random_probs(1, K, rng);
    const int y = static_cast<int>(rng() % K);
    const int got = mine_hardest_negative<double>(p.row(0), y);
    ASSERT_NE(got, y);
    for (int j = 0; j < K; ++j)
      if (j != y) ASSERT_GE(p[got], p[j]);
  }
}

TEST(SimpleNegative, SingleRemainingChoice) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_simple_negative(0, 1, 3, rng), 2);
}

TEST(SimpleNegative, UniformOverValidLabels) {
  Rng rng(8);
  std::map<int, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const int s = sample_simple_negative(3, 7, 10, rng);
    ASSERT_NE(s, 3);
    ASSERT_NE(s, 7);
    ++counts[s];
  }
  EXPECT_EQ(counts.size(), 8u);
  for (const auto& [label, c] : counts) EXPECT_NEAR(static_cast<double>(c) / draws, 1.0 / 8, 0.02) << label;
}

TEST(SimpleNegative, TwoClassesNeedsFallback) {
  Rng rng(9);
  EXPECT_THROW(sample_simple_negative(0, 1, 2, rng), ConfigError);
  EXPECT_EQ(sample_simple_negative(0, 1, 2, rng, true), 1);
}

TEST(OtherLabel, NeverThePseudoLabel) {
  Rng rng(10);
  for (int i = 0; i < 1000; ++i) {
    const int y = i % 5;
    const int o = sample_other_label(y, 5, rng);
    ASSERT_NE(o, y);
    ASSERT_GE(o, 0);
    ASSERT_LT(o, 5);
  }
}

// ---------------------------------------------------------------- matching

TEST(MatchingLabeled, UninformativeHead) {
  const std::vector<double> half(5, 0.5);
  EXPECT_NEAR(matching_loss_labeled<double>(half, half, half), 3 * std::log(2.0), kTol);
  EXPECT_NEAR(3 * std::log(2.0), 2.079442, kTol);
}

TEST(MatchingLabeled, PerfectMatching) {
  const std::vector<double> pos(3, 1 - kScoreEps), neg(3, kScoreEps);
  const double exact = -3 * std::log(1 - kScoreEps);
  EXPECT_NEAR(matching_loss_labeled<double>(pos, neg, neg), exact, kTol);
  EXPECT_LT(exact, 1e-5);
}

TEST(MatchingLabeled, HandArithmetic) {
  const double direct = -(std::log(0.8) + std::log(1 - 0.3) + std::log(1 - 0.1));
  EXPECT_NEAR(direct, 0.685179, kTol);
  const std::vector<double> pos{0.8}, hard{0.3}, simple{0.1};
  EXPECT_NEAR(matching_loss_labeled<double>(pos, hard, simple), direct, kTol);
}

TEST(MatchingLabeled, GradientMatchesFiniteDifferences) {
  std::vector<double> x{0.8, 0.6, 0.3, 0.45, 0.1, 0.7};  // pos | hard | simple, n = 2
  auto f = [&] {
    return matching_loss_labeled<double>(std::span(x).subspan(0, 2), std::span(x).subspan(2, 2),
                                         std::span(x).subspan(4, 2));
  };
  std::vector<double> d(6);
  matching_loss_labeled<double>(std::span(x).subspan(0, 2), std::span(x).subspan(2, 2),
                                std::span(x).subspan(4, 2), std::span(d).subspan(0, 2),
                                std::span(d).subspan(2, 2), std::span(d).subspan(4, 2));
  EXPECT_LE(max_rel_err(d, numeric_grad(x, f), 1e-6), 1e-6);
}

double entropy_oracle(double s) { return -s * std::log(s) - (1 - s) * std::log(1 - s); }

TEST(MatchingEntropy, MaximumEntropy) {
  const std::vector<double> half(4, 0.5);
  EXPECT_NEAR(matching_entropy_unlabeled<double>(half, half), 2 * std::log(2.0), kTol);
}

TEST(MatchingEntropy, ConfidentHead) {
  const std::vector<double> lo(3, kScoreEps), hi(3, 1 - kScoreEps);
  const double exact = 2 * entropy_oracle(kScoreEps);
  EXPECT_NEAR(matching_entropy_unlabeled<double>(hi, lo), exact, kTol);
  EXPECT_NEAR(matching_entropy_unlabeled<double>(lo, hi), exact, kTol);
  EXPECT_LT(exact, 1e-4);
}

TEST(MatchingEntropy, HandArithmetic) {
  const double direct = entropy_oracle(0.9) + entropy_oracle(0.2);
  EXPECT_NEAR(entropy_oracle(0.9), 0.325083, kTol);
  EXPECT_NEAR(entropy_oracle(0.2), 0.500402, kTol);
  EXPECT_NEAR(direct, 0.825485, kTol);
  EXPECT_NEAR(matching_entropy_unlabeled<double>(std::vector<double>{0.9}, std::vector<double>{0.2}),
              direct, kTol);
  EXPECT_NEAR(binary_entropy(0.9), entropy_oracle(0.9), kTol);
}

TEST(MatchingEntropy, GradientMatchesFiniteDifferences) {
  std::vector<double> x{0.9, 0.35, 0.2, 0.6};
  auto f = [&] {
    return matching_entropy_unlabeled<double>(std::span(x).subspan(0, 2), std::span(x).subspan(2, 2));
  };
  std::vector<double> d(4);
  matching_entropy_unlabeled<double>(std::span(x).subspan(0, 2), std::span(x).subspan(2, 2),
                                     std::span(d).subspan(0, 2), std::span(d).subspan(2, 2));
  EXPECT_LE(max_rel_err(d, numeric_grad(x, f), 1e-6), 1e-6);
}

// ---------------------------------------------------------------- compose

TEST(Compose, StageOne) {
  LossComponents c;
  c.ce = 1;
  c.cm_l = 2;
  c.rot = 3;
  const auto b = compose(1, c);
  EXPECT_NEAR(b.total, 6, kTol);
  EXPECT_EQ(b.cc, 0);
  EXPECT_EQ(b.cm_u, 0);
}

TEST(Compose, StageTwo) {
  LossComponents c;
  c.ce = c.cc = c.rot = c.cm_l = c.cm_u = 1;
  EXPECT_NEAR(compose(2, c).total, 5, kTol);
}

TEST(Compose, TotalIsComponentSum) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    LossComponents c;
    c.ce = u(rng);
    c.cc = u(rng);
    c.rot = u(rng);
    c.cm_l = u(rng);
    c.cm_u = u(rng);
    const auto b = compose(2, c);
    EXPECT_NEAR(b.total, b.ce + b.cc + b.rot + b.cm_l + b.cm_u, kTol);
  }
}

TEST(Compose, MissingOrMisplacedComponents) {
  LossComponents c;
  c.ce = 1;
  c.cm_l = 1;
  EXPECT_THROW(compose(1, c), ConfigError);  // rot missing
  c.rot = 1;
  c.cc = 1;
  EXPECT_THROW(compose(1, c), ConfigError);  // cc outside stage 2
  LossTerms no_rot;
  no_rot.rot = false;
  LossComponents d;
  d.ce = 1;
  d.cm_l = 2;
  EXPECT_NEAR(compose(1, d, no_rot).total, 3, kTol);
}

}  // namespace
