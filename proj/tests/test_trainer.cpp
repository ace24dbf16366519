#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "cmssl/config.hpp"
#include "cmssl/trainer.hpp"
#include "support/oracles.hpp"

namespace {

using namespace cmssl;
namespace fs = std::filesystem;
using json = nlohmann::json;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmssl_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<json> read_log(const fs::path& run_dir) {
  std::vector<json> out;
  std::ifstream in(run_dir / "metrics.jsonl");
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

const OpenSetDataset& synthetic() {
  static const OpenSetDataset ds = oracle::synthetic_openset(0);
  return ds;
}

TEST(Schedule, CosineLearningRate) {
  EXPECT_EQ(cosine_lr(0.03, 0, 250000), 0.03);
  EXPECT_NEAR(cosine_lr(0.03, 250000, 250000), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(0.03, 249999, 250000), 0.0, 1e-10);
  EXPECT_NEAR(cosine_lr(0.03, 125000, 250000), 0.015, 1e-15);
  double prev = 1;
  for (std::uint64_t t = 0; t <= 100; ++t) {
    const double lr = cosine_lr(0.1, t, 100);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Schedule, FullScaleCycles) {
  const TrainConfig c = TrainConfig::full_scale();
  EXPECT_EQ(c.total_iters(), 250000u);
  EXPECT_EQ(c.stage2_begin(), 50000u);
  EXPECT_EQ(c.stage2_iters / c.cleaning_cycle, 10);
}

TEST(Sgd, MomentumAndDecay) {
  Param<double> p("w", 1, 2), q("b", 1, 2, 1, 1, false);
  p.value.vec() = {1.0, -2.0};
  p.grad.vec() = {0.5, 0.25};
  q.value.vec() = {3.0, 0.0};
  q.grad.vec() = {1.0, 1.0};
  std::vector<Param<double>*> params{&p, &q};
  std::vector<Tensor<double>> velocity;
  sgd_step<double>(params, velocity, 0.1, 0.9, 0.01);
  // v = g + wd w (decay on w only); w -= lr v
  EXPECT_NEAR(p.value.vec()[0], 1.0 - 0.1 * (0.5 + 0.01), 1e-15);
  EXPECT_NEAR(p.value.vec()[1], -2.0 - 0.1 * (0.25 - 0.02), 1e-15);
  EXPECT_NEAR(q.value.vec()[0], 3.0 - 0.1, 1e-15);
  const double v0 = velocity[0].vec()[0], w0 = p.value.vec()[0];
  sgd_step<double>(params, velocity, 0.1, 0.9, 0.01);
  EXPECT_NEAR(velocity[0].vec()[0], 0.9 * v0 + 0.5 + 0.01 * w0, 1e-15);
}

TEST(Trainer, DeskSmokeOnMnist) {
  ExperimentConfig cfg = default_experiment("desk", "full", "mnist-id5");
  const OpenSetDataset data = build_openset_dataset(cfg.dataset, data_root());
  EXPECT_EQ(data.labeled.size(), 125u);
  std::vector<LossBreakdown> seen;
  Trainer trainer(cfg.train, data, "");
  trainer.on_step = [&](std::uint64_t, const LossBreakdown& l) { seen.push_back(l); };
  trainer.run(3);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_EQ(trainer.iteration(), 3u);
  for (const auto& l : seen) {
    EXPECT_TRUE(std::isfinite(l.total));
    EXPECT_GT(l.ce, 0);
    EXPECT_GT(l.cm_l, 0);
    EXPECT_GT(l.rot, 0);
    EXPECT_EQ(l.cc, 0);
    EXPECT_EQ(l.cm_u, 0);
    EXPECT_NEAR(l.total, l.ce + l.cm_l + l.rot, 1e-6);
  }
  EXPECT_FALSE(trainer.filter_state().has_value());
}

TEST(Trainer, StageTwoCleansEveryCycle) {
  const fs::path dir = temp_dir("stage2");
  Trainer trainer(oracle::tiny_train_config(), synthetic(), dir);
  std::vector<LossBreakdown> losses;
  trainer.on_step = [&](std::uint64_t, const LossBreakdown& l) { losses.push_back(l); };
  trainer.run();
  ASSERT_EQ(losses.size(), 120u);
  for (int t = 0; t < 60; ++t) EXPECT_EQ(losses[t].cc, 0) << t;
  for (int t = 60; t < 120; ++t) {
    EXPECT_GT(losses[t].cc, 0) << t;
    EXPECT_GT(losses[t].cm_u, 0) << t;
    const auto& l = losses[t];
    EXPECT_NEAR(l.total, l.ce + l.cc + l.rot + l.cm_l + l.cm_u, 1e-6) << t;
  }
  ASSERT_EQ(trainer.cleaning_reports().size(), 3u);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(trainer.cleaning_reports()[c].cycle, c);
    EXPECT_EQ(trainer.cleaning_reports()[c].iteration, 60u + 20u * c);
  }
  ASSERT_TRUE(trainer.filter_state().has_value());
  EXPECT_EQ(*trainer.mask().load(), trainer.filter_state()->keep_mask);
  EXPECT_EQ(list_checkpoints(dir).size(), 6u);

  const auto log = read_log(dir);
  int cleaning = 0, evals = 0;
  for (const auto& j : log) {
    if (j.value("event", "") == "cleaning") {
      ++cleaning;
      continue;
    }
    EXPECT_EQ(j.at("iter").get<int>() % 10, 0);
    evals += j.contains("val_acc");
  }
  EXPECT_EQ(cleaning, 3);
  EXPECT_EQ(evals, 6);

  const MetricReport r = evaluate_run(dir, trainer.config(), synthetic(), 3);
  EXPECT_GE(r.accuracy_mean, 0.0);
  EXPECT_LE(r.accuracy_mean, 1.0);
  EXPECT_GE(r.auroc_mean, 0.0);
  EXPECT_EQ(r.cleaning.size(), 3u);
}

TEST(Trainer, FilterNoneKeepsEverything) {
  TrainConfig cfg = oracle::tiny_train_config();
  cfg.apply_method("uda-ss");
  cfg.stage1_iters = 0;
  cfg.stage2_iters = 30;
  Trainer trainer(cfg, synthetic(), "");
  trainer.on_step = [&](std::uint64_t t, const LossBreakdown&) {
    const auto mask = trainer.mask().load();
    ASSERT_EQ(mask->size(), synthetic().unlabeled.size());
    EXPECT_EQ(std::count(mask->begin(), mask->end(), 1), static_cast<long>(mask->size())) << t;
  };
  trainer.run();
  EXPECT_TRUE(trainer.cleaning_reports().empty());
  EXPECT_FALSE(trainer.filter_state().has_value());
}

TEST(Trainer, SameSeedSameLog) {
  const fs::path a = temp_dir("repro_a"), b = temp_dir("repro_b"), c = temp_dir("repro_c");
  TrainConfig cfg = oracle::tiny_train_config();
  {
    Trainer t(cfg, synthetic(), a);
    t.run(80);
  }
  {
    Trainer t(cfg, synthetic(), b);
    t.run(80);
  }
  cfg.seed = 1;
  {
    Trainer t(cfg, synthetic(), c);
    t.run(80);
  }
  EXPECT_FALSE(slurp(a / "metrics.jsonl").empty());
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_NE(slurp(a / "metrics.jsonl"), slurp(c / "metrics.jsonl"));
  const auto ca = list_checkpoints(a), cb = list_checkpoints(b);
  ASSERT_EQ(ca.size(), cb.size());
  EXPECT_EQ(slurp(ca.back() / "params.bin"), slurp(cb.back() / "params.bin"));
}

class Resume : public ::testing::TestWithParam<int> {};

TEST_P(Resume, MatchesUninterrupted) {
  const int at = GetParam();
  const TrainConfig cfg = oracle::tiny_train_config();
  const fs::path full = temp_dir("resume_full_" + std::to_string(at)),
                 part = temp_dir("resume_part_" + std::to_string(at));
  {
    Trainer t(cfg, synthetic(), full);
    t.run();
  }
  fs::copy(full, part, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  std::ostringstream name;
  name << "iter_" << std::setw(8) << std::setfill('0') << at;
  Trainer t(cfg, synthetic(), part);
  t.resume(part / "checkpoints" / name.str());
  EXPECT_EQ(t.iteration(), static_cast<std::uint64_t>(at));
  for (const auto& j : read_log(part)) EXPECT_LE(j.at("iter").get<int>(), at);
  t.run();
  EXPECT_EQ(slurp(full / "metrics.jsonl"), slurp(part / "metrics.jsonl"));
  const auto cf = list_checkpoints(full), cp = list_checkpoints(part);
  ASSERT_EQ(cf.size(), cp.size());
  for (std::size_t i = 0; i < cf.size(); ++i) {
    EXPECT_EQ(slurp(cf[i] / "params.bin"), slurp(cp[i] / "params.bin")) << cf[i];
    EXPECT_EQ(slurp(cf[i] / "state.json"), slurp(cp[i] / "state.json")) << cf[i];
  }
}

// Mid stage 1, the stage boundary (cleaning happens after resuming), mid stage 2.
INSTANTIATE_TEST_SUITE_P(Points, Resume, ::testing::Values(20, 60, 100));

TEST(Trainer, ResumeRejectsMismatches) {
  const fs::path dir = temp_dir("resume_bad");
  TrainConfig cfg = oracle::tiny_train_config();
  {
    Trainer t(cfg, synthetic(), dir);
    t.run(20);
  }
  const fs::path ck = list_checkpoints(dir).front();
  Trainer missing(cfg, synthetic(), "");
  EXPECT_THROW(missing.resume(dir / "checkpoints" / "iter_99999999"), InputError);
  cfg.seed = 9;
  Trainer other(cfg, synthetic(), "");
  EXPECT_THROW(other.resume(ck), ConfigError);
}

TEST(Checkpoint, RoundTrip) {
  const fs::path dir = temp_dir("ckpt");
  const TrainConfig cfg = oracle::tiny_train_config();
  const Model<float> model(model_config(cfg, 3, 1, 8), 5);
  const CheckpointMeta meta{42, 8, 3, "tiny", 5, 1, 8};
  save_checkpoint(dir / "c", model, meta, nullptr, nullptr);
  EXPECT_FALSE(fs::exists(dir / "c" / "optim.bin"));
  const Model<float> back = load_checkpoint_model(dir / "c", cfg);
  EXPECT_EQ(back.checksum(), model.checksum());
  const auto m = checkpoint_meta_from_json(to_json(meta));
  EXPECT_EQ(m.iteration, 42u);
  EXPECT_EQ(m.backbone_id, "tiny");
  EXPECT_EQ(to_json(m), to_json(meta));

  const Tensor<float> x = to_tensor<float>(std::span<const Image>(synthetic().test.data(), 5));
  const auto pa = model.classify(model.extract_features(x)), pb = back.classify(back.extract_features(x));
  EXPECT_EQ(pa.vec(), pb.vec());
}

TEST(Checkpoint, TensorFileRoundTrip) {
  const fs::path dir = temp_dir("tensors");
  Tensor<float> a(2, 3), b(1, 2, 2, 2);
  for (std::size_t i = 0; i < a.size(); ++i) a.vec()[i] = 0.1f * static_cast<float>(i) - 1e-30f;
  b.vec().assign(b.size(), std::numeric_limits<float>::denorm_min());
  save_tensors(dir / "t.bin", {{"a", &a}, {"b", &b}});
  const auto back = load_tensors(dir / "t.bin");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "a");
  EXPECT_EQ(back[0].second.vec(), a.vec());
  EXPECT_EQ(back[1].second.shape(), b.shape());
  EXPECT_EQ(back[1].second.vec(), b.vec());
}

TEST(Checkpoint, AveragingOverTheLastCheckpoints) {
  const fs::path dir = temp_dir("avg");
  const TrainConfig cfg = oracle::tiny_train_config();
  Model<float> model(model_config(cfg, 3, 1, 8), 2);
  const std::vector<Image>& pool = synthetic().test;
  const Image &a = pool[0], &b = pool[1];
  const std::vector<Image> pair{a, b};
  const auto f = model.extract_features(to_tensor<float>(std::span<const Image>(pair)));
  const int D = model.feature_dim();

  // Discriminates a (class 0) from b (class 1).
  auto& W = model.classifier().weight.value;
  auto& bias = model.classifier().bias.value;
  double mid_dot = 0;
  for (int d = 0; d < D; ++d) {
    const float diff = f.at(0, d) - f.at(1, d), mid = 0.5f * (f.at(0, d) + f.at(1, d));
    W.at(0, d) = diff;
    W.at(1, d) = -diff;
    W.at(2, d) = 0;
    mid_dot += diff * mid;
  }
  bias.vec() = {static_cast<float>(-mid_dot), static_cast<float>(mid_dot), 0.f};
  const CheckpointMeta meta{0, D, 3, "tiny", cfg.seed, 1, 8};
  save_checkpoint(dir / "checkpoints" / "iter_00000002", model, meta, nullptr, nullptr);
  // Always class 0.
  W.vec().assign(W.size(), 0.f);
  bias.vec() = {1.f, 0.f, 0.f};
  save_checkpoint(dir / "checkpoints" / "iter_00000001", model, meta, nullptr, nullptr);
  // Always class 2; only used when averaging all three.
  bias.vec() = {0.f, 0.f, 1.f};
  save_checkpoint(dir / "checkpoints" / "iter_00000000", model, meta, nullptr, nullptr);

  std::vector<Image> test(8, a);
  test.push_back(b);
  test.push_back(b);
  std::vector<int> labels(8, 0);
  labels.push_back(1);
  labels.push_back(2);

  const auto ckpts = list_checkpoints(dir);
  ASSERT_EQ(ckpts.size(), 3u);
  EXPECT_EQ(ckpts.back().filename(), "iter_00000002");
  const auto avg = evaluate_with_checkpoint_averaging(ckpts, cfg, test, labels, 2);
  ASSERT_EQ(avg.per_checkpoint.size(), 2u);
  EXPECT_NEAR(avg.per_checkpoint[0], 0.8, 1e-12);
  EXPECT_NEAR(avg.per_checkpoint[1], 0.9, 1e-12);
  EXPECT_NEAR(avg.mean, 0.85, 1e-12);
  EXPECT_EQ(avg.used, 2u);
  const auto all = evaluate_with_checkpoint_averaging(ckpts, cfg, test, labels, 20);
  EXPECT_EQ(all.used, 3u);
  EXPECT_NEAR(all.mean, (0.1 + 0.8 + 0.9) / 3, 1e-12);
  EXPECT_THROW(evaluate_with_checkpoint_averaging({}, cfg, test, labels, 2), InputError);
}

TEST(Trainer, NonFiniteLossRaises) {
  Trainer trainer(oracle::tiny_train_config(), synthetic(), "");
  auto& bias = trainer.model().classifier().bias.value.vec();
  bias.assign(bias.size(), std::numeric_limits<float>::infinity());
  try {
    trainer.run(1);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("labeled indices"), std::string::npos) << e.what();
  }
}

}  // namespace
