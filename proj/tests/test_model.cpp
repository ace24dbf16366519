#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cmssl/model.hpp"

namespace {

using namespace cmssl;

ModelConfig desk_config(int K = 10) {
  ModelConfig mc;
  mc.backbone = BackboneConfig::preset("small-resnet", 1, 28, 128);
  mc.num_classes = K;
  return mc;
}

Tensor<float> random_images(int n, std::uint64_t seed, int size = 28) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor<float> t(n, 1, size, size);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

Tensor<float> random_logits(int n, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0, 3);
  Tensor<float> t(n, c);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

TEST(Backbone, FeatureShape) {
  const Model<float> model(desk_config(), 1);
  const auto f = model.extract_features(random_images(5, 2));
  EXPECT_EQ(f.n(), 5);
  EXPECT_EQ(f.c(), 128);
  EXPECT_EQ(f.size(), 5u * 128);
}

TEST(Backbone, DuplicatedImageGivesIdenticalRows) {
  const Model<float> model(desk_config(), 1);
  auto x = random_images(3, 3);
  std::copy_n(x.data(), x.stride(), x.data() + 2 * x.stride());
  const auto f = model.extract_features(x);
  for (int d = 0; d < f.c(); ++d) EXPECT_EQ(f.at(0, d), f.at(2, d));
}

TEST(Backbone, OutputsFinite) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model<float> model(desk_config(), seed);
    const auto x = random_images(7, seed + 10);
    for (float v : model.extract_features(x).vec()) ASSERT_TRUE(std::isfinite(v));
    typename Backbone<float>::Tape tape;
    Tensor<float> f;
    model.backbone().forward_train(x, tape, f);
    for (float v : f.vec()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Backbone, WrongInputShapeIsConfigError) {
  const Model<float> model(desk_config(), 1);
  EXPECT_THROW(model.extract_features(random_images(2, 1, 32)), ConfigError);
}

TEST(Classifier, ZeroWeightsGiveUniform) {
  Model<float> model(desk_config(10), 1);
  model.classifier().weight.value.zero();
  model.classifier().bias.value.zero();
  const auto p = model.classify(model.extract_features(random_images(3, 4)));
  for (float v : p.vec()) EXPECT_NEAR(v, 0.1, 1e-7);
}

TEST(Classifier, SoftmaxShiftInvariance) {
  const auto z = random_logits(6, 10, 5);
  auto shifted = z;
  for (auto& v : shifted.vec()) v += 7.25f;
  const auto a = softmax_rows(z), b = softmax_rows(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Classifier, SoftmaxNormalized) {
  const auto p = softmax_rows(random_logits(50, 10, 6));
  for (int i = 0; i < p.n(); ++i) {
    double s = 0;
    for (int j = 0; j < p.c(); ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(RotationHead, ZeroWeightsGiveQuarter) {
  Model<float> model(desk_config(), 1);
  model.rotation_head().weight.value.zero();
  model.rotation_head().bias.value.zero();
  const auto q = model.predict_rotation(model.extract_features(random_images(3, 7)));
  EXPECT_EQ(q.c(), 4);
  for (float v : q.vec()) EXPECT_NEAR(v, 0.25, 1e-7);
}

TEST(RotationHead, ShiftInvariantAndNormalized) {
  const auto z = random_logits(20, 4, 8);
  auto shifted = z;
  for (auto& v : shifted.vec()) v -= 3.5f;
  const auto a = softmax_rows(z), b = softmax_rows(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  for (int i = 0; i < a.n(); ++i) EXPECT_NEAR(a.at(i, 0) + a.at(i, 1) + a.at(i, 2) + a.at(i, 3), 1.0, 1e-5);
}

TEST(MatchingHead, ZeroFinalLayerGivesHalf) {
  Model<float> model(desk_config(), 1);
  model.matcher().out.weight.value.zero();
  model.matcher().out.bias.value.zero();
  const auto f = model.extract_features(random_images(4, 9));
  for (int y = 0; y < 10; ++y) EXPECT_EQ(model.match_score(f.row(y % 4), y), 0.5f);
}

TEST(MatchingHead, DeterministicQueries) {
  const Model<float> model(desk_config(), 1);
  const auto f = model.extract_features(random_images(2, 10));
  EXPECT_EQ(model.match_score(f.row(1), 3), model.match_score(f.row(1), 3));
}

TEST(MatchingHead, ScoresWithinClampRange) {
  // Large random weights push the logits far into saturation.
  Model<double> model(desk_config(), 3);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> big(0, 40);
  for (auto& v : model.matcher().out.weight.value.vec()) v = big(rng);
  Tensor<double> f(1000, 128);
  std::vector<int> labels(1000);
  for (auto& v : f.vec()) v = big(rng);
  for (auto& y : labels) y = static_cast<int>(rng() % 10);
  int saturated = 0;
  for (double s : model.match_scores(f, labels)) {
    ASSERT_GE(s, kScoreEps);
    ASSERT_LE(s, 1 - kScoreEps);
    saturated += s == kScoreEps || s == 1 - kScoreEps;
  }
  EXPECT_GT(saturated, 0);
}

TEST(MatchingHead, RejectsOutOfRangeLabel) {
  const Model<float> model(desk_config(), 1);
  const auto f = model.extract_features(random_images(1, 12));
  EXPECT_THROW(model.match_score(f.row(0), 10), InputError);
  EXPECT_THROW(model.match_score(f.row(0), -1), InputError);
}

TEST(Model, SeedDeterminesParameters) {
  const Model<float> a(desk_config(), 4), b(desk_config(), 4), c(desk_config(), 5);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
}

TEST(Model, InferenceLeavesModelUnchanged) {
  const Model<float> model(desk_config(), 6);
  const auto before = model.checksum();
  const auto f = model.extract_features(random_images(8, 13));
  model.classify(f);
  model.predict_rotation(f);
  EXPECT_EQ(model.checksum(), before);
}

}  // namespace
