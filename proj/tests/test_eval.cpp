#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "cmssl/eval.hpp"
#include "support/oracles.hpp"

namespace {

using namespace cmssl;

TEST(Auroc, PerfectSeparation) {
  EXPECT_EQ(auroc(std::vector<double>(5, 0.9), std::vector<double>(7, 0.1)), 1.0);
  EXPECT_EQ(auroc(std::vector<double>(5, 0.1), std::vector<double>(7, 0.9)), 0.0);
}

TEST(Auroc, SameDistributionIsChance) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(0, 1);
  std::vector<double> a(10000), b(10000);
  for (auto& v : a) v = d(rng);
  for (auto& v : b) v = d(rng);
  EXPECT_NEAR(auroc(a, b), 0.5, 0.02);
}

TEST(Auroc, OneWinOneLoss) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.8, 0.6}, std::vector<double>{0.7}), 0.5);
}

TEST(Auroc, TiesCountHalf) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.5}, std::vector<double>{0.5}), 0.5);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.5, 0.7}, std::vector<double>{0.5, 0.1}), 0.875);
}

TEST(Auroc, MatchesAllPairsCount) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 200, m = 1 + rng() % 200;
    const bool ties = t % 2 == 0;
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> a(n), b(m);
    const double shift = u(rng) * 0.5;
    for (auto& v : a) v = ties ? std::round((u(rng) + shift) * 8) / 8 : u(rng) + shift;
    for (auto& v : b) v = ties ? std::round(u(rng) * 8) / 8 : u(rng);
    ASSERT_NEAR(auroc(a, b), oracle::brute_auroc(a, b), 1e-12) << "trial " << t;
  }
}

TEST(Auroc, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> a(150), b(120);
  for (auto& v : a) v = std::round(u(rng) * 32) / 32 + 0.125;  // dyadic, so ties are exact
  for (auto& v : b) v = std::round(u(rng) * 32) / 32;
  auto f = [](double x) { return std::exp(3 * x) - 7; };
  std::vector<double> fa(a.size()), fb(b.size());
  std::transform(a.begin(), a.end(), fa.begin(), f);
  std::transform(b.begin(), b.end(), fb.begin(), f);
  EXPECT_EQ(auroc(a, b), auroc(fa, fb));
}

TEST(Auroc, EmptySideIsAnError) {
  EXPECT_THROW(auroc(std::vector<double>{}, std::vector<double>{0.1}), InputError);
  EXPECT_THROW(auroc(std::vector<double>{0.1}, std::vector<double>{}), InputError);
}

Tensor<float> onehot_probs(const std::vector<int>& pred, int K) {
  Tensor<float> p(static_cast<int>(pred.size()), K);
  for (std::size_t i = 0; i < pred.size(); ++i) p.at(static_cast<int>(i), pred[i]) = 1.f;
  return p;
}

TEST(Accuracy, Examples) {
  const std::vector<int> y{0, 1, 2, 1};
  EXPECT_EQ(accuracy(onehot_probs(y, 3), y), 1.0);
  EXPECT_EQ(accuracy(onehot_probs({1, 2, 0, 0}, 3), y), 0.0);
  EXPECT_EQ(accuracy(onehot_probs({0, 0, 1, 1}, 2), std::vector<int>{0, 1, 1, 0}), 0.5);
}

TEST(Accuracy, ComplementsErrorRate) {
  std::mt19937_64 rng(4);
  std::vector<int> pred(97), y(97);
  for (auto& v : pred) v = static_cast<int>(rng() % 5);
  for (auto& v : y) v = static_cast<int>(rng() % 5);
  const double acc = accuracy(onehot_probs(pred, 5), y);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < y.size(); ++i) wrong += pred[i] != y[i];
  EXPECT_EQ(acc + static_cast<double>(wrong) / y.size(), 1.0);
}

TEST(Accuracy, RandomClassifierWithinBinomialBound) {
  const int K = 5, n = 20000;
  std::mt19937_64 rng(5);
  std::vector<int> pred(n), y(n);
  for (auto& v : pred) v = static_cast<int>(rng() % K);
  for (auto& v : y) v = static_cast<int>(rng() % K);
  const double p = 1.0 / K, sigma = std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(accuracy(onehot_probs(pred, K), y), p, 3 * sigma);
}

TEST(Accuracy, ShapeMismatchIsAnError) {
  EXPECT_THROW(accuracy(onehot_probs({0, 1}, 2), std::vector<int>{0}), InputError);
}

TEST(Embeddings, ShapeAndRoundTrip) {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> d(0, 1);
  std::vector<EmbeddingRow> rows;
  for (int i = 0; i < 100; ++i) {
    EmbeddingRow r{"u" + std::to_string(i), i % 3 ? "id" : "ood", i % 5, std::vector<float>(128)};
    for (auto& v : r.feature) v = d(rng) * 100;
    rows.push_back(r);
  }
  rows.push_back(rows[7]);
  std::stringstream ss;
  write_embeddings(ss, rows);
  const std::string text = ss.str();
  std::istringstream lines(text);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(std::count(header.begin(), header.end(), '\t'), 3 + 128 - 1);
  EXPECT_EQ(header.substr(0, 20), "id\tprovenance\tlabel\t");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 102);

  std::istringstream in(text);
  const auto back = read_embeddings(in);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].id, rows[i].id);
    EXPECT_EQ(back[i].provenance, rows[i].provenance);
    EXPECT_EQ(back[i].label, rows[i].label);
    ASSERT_EQ(back[i].feature.size(), 128u);
    for (std::size_t j = 0; j < 128; ++j)
      EXPECT_NEAR(back[i].feature[j], rows[i].feature[j], 5e-6 * std::abs(rows[i].feature[j]));
  }
  EXPECT_EQ(back[100].feature, back[7].feature);
}

TEST(Embeddings, ExportFromModelDuplicatesRows) {
  ModelConfig mc;
  mc.backbone = BackboneConfig::preset("tiny", 1, 8, 8);
  mc.num_classes = 3;
  const Model<float> model(mc, 1);
  std::vector<Image> images(3, Image(1, 8, 8, 0.2f));
  images[1].pixels.assign(64, 0.7f);
  const std::vector<std::string> ids{"a", "b", "c"}, prov{"id", "ood", "id"};
  const auto rows = export_embeddings(model, images, ids, prov, {});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].feature, rows[2].feature);
  EXPECT_EQ(rows[0].label, rows[2].label);
  EXPECT_EQ(rows[1].provenance, "ood");
  EXPECT_EQ(rows[0].feature.size(), 8u);
}

TEST(Aggregate, SingleReportHasZeroStd) {
  MetricReport r;
  r.accuracy_mean = 0.7;
  r.auroc_mean = 0.9;
  const auto a = aggregate_seeds(std::vector<MetricReport>{r});
  EXPECT_EQ(a.accuracy_mean, 0.7);
  EXPECT_EQ(a.accuracy_std, 0.0);
  EXPECT_EQ(a.seeds, 1);
}

TEST(Aggregate, MeanAndPopulationStd) {
  MetricReport a, b;
  a.accuracy_mean = 0.9;
  b.accuracy_mean = 0.8;
  a.auroc_mean = 0.6;
  b.auroc_mean = 0.8;
  const auto r = aggregate_seeds(std::vector<MetricReport>{a, b});
  EXPECT_NEAR(r.accuracy_mean, 0.85, 1e-12);
  EXPECT_NEAR(r.accuracy_std, 0.05, 1e-12);
  EXPECT_NEAR(r.auroc_mean, 0.7, 1e-12);
  EXPECT_EQ(r.seeds, 2);
}

TEST(Aggregate, OrderInvariant) {
  std::vector<MetricReport> reps(4);
  const double acc[] = {0.61, 0.93, 0.72, 0.8}, au[] = {0.7, 0.75, 0.99, 0.5};
  for (int i = 0; i < 4; ++i) {
    reps[i].accuracy_mean = acc[i];
    reps[i].auroc_mean = au[i];
  }
  const auto x = aggregate_seeds(reps);
  std::reverse(reps.begin(), reps.end());
  std::swap(reps[0], reps[2]);
  const auto y = aggregate_seeds(reps);
  EXPECT_EQ(x.accuracy_mean, y.accuracy_mean);
  EXPECT_EQ(x.accuracy_std, y.accuracy_std);
  EXPECT_EQ(x.auroc_mean, y.auroc_mean);
  EXPECT_EQ(x.auroc_std, y.auroc_std);
  EXPECT_EQ(to_json(x).dump(), to_json(y).dump());
}

}  // namespace
