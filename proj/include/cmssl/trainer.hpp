#pragma once

// Two-stage training: a warm-up on ce + cm_l + rot over all data, then the
// full objective with periodic cleaning of the unlabeled pool.
//
// Batch layout of one step (rows of the shared backbone forward):
//   main: weak[n labeled, m unlabeled] | strong[n + m] (stage 2 with cc) | rot0 of the r extras
//   rot:  rot1[R] | rot2[R] | rot3[R]          with R = n + m + r
// Rotation 0 of a batch sample is its weak row. The r extras are dropped pool
// samples that feed only the rotation loss.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmssl/augment.hpp"
#include "cmssl/data.hpp"
#include "cmssl/eval.hpp"
#include "cmssl/filter.hpp"
#include "cmssl/losses.hpp"
#include "cmssl/model.hpp"

namespace cmssl {

/// Non-finite loss or another failure during training.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int stage1_iters = 50000;
  int stage2_iters = 200000;
  int cleaning_cycle = 20000;
  int n = 64;
  int m = 320;
  double lr0 = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  int eval_avg_last = 20;
  int log_every = 100;
  int eval_every = 1000;
  LossWeights weights;

  bool enable_rotation = true;
  bool enable_cm_u = true;
  bool enable_warmup = true;
  bool enable_consistency = true;
  bool enable_matching = true;
  FilterMode filter_mode = FilterMode::kMatching;

  /// Dropped samples keep feeding the rotation loss; false excludes them from all terms.
  bool rotation_on_dropped = true;
  /// Entropy term over kept unlabeled samples only; false adds the dropped extras.
  bool cm_u_kept_only = true;
  /// 4: every rotation of every image; 1: one sampled rotation per image.
  int rotations_per_image = 4;
  /// Rotated views share batch-norm statistics with the other views.
  bool bn_include_rotations = true;
  bool sharpen_targets = false;
  double sharpen_temperature = 0.4;
  /// For K < 3 reuse the hardest negative as the simple one instead of failing.
  bool simple_negative_fallback = false;
  int otsu_bins = 256;

  std::string backbone = "small-resnet";
  int feature_dim = 128;
  bool label_embed_bias = true;
  AugmentConfig augment;

  std::uint64_t total_iters() const {
    return static_cast<std::uint64_t>(stage1_iters) + stage2_iters;
  }
  std::uint64_t stage2_begin() const { return enable_warmup ? stage1_iters : 0; }
  int stage_of(std::uint64_t t) const { return t < stage2_begin() ? 1 : 2; }
  LossTerms terms() const;
  void validate() const;

  static TrainConfig full_scale();
  /// CPU-scale schedule for the MNIST presets.
  static TrainConfig desk();
  /// Applies a named variant: full, supervised, uda, uda-ss, confidence, no-ss,
  /// no-warmup, no-cmu.
  void apply_method(const std::string& method);
};

double cosine_lr(double lr0, std::uint64_t t, std::uint64_t total);

/// v = mu v + g + wd w (decayed params only); w -= lr v.
template <class T>
void sgd_step(std::span<Param<T>* const> params, std::vector<Tensor<T>>& velocity, double lr,
              double momentum, double weight_decay);

// ---------------------------------------------------------------- one step

struct BatchLayout {
  int n = 0, m = 0, r = 0;
  bool strong = false;
  int rotations = 4;  // 0 (no rotation loss), 1 or 4

  int B() const { return n + m; }
  int R() const { return n + m + r; }
  int main_rows() const { return B() * (strong ? 2 : 1) + (rotations == 4 ? r : 0); }
  int rot_rows() const { return rotations == 4 ? 3 * R() : rotations == 1 ? R() : 0; }
  int strong_row(int i) const { return B() + i; }
  /// Row of rotation j of rotation source g (g < B: batch sample, else extra).
  int rotation_row(int g, int j) const;
};

template <class T>
struct StepBatch {
  BatchLayout layout;
  Tensor<T> main_images;
  Tensor<T> rot_images;
  std::vector<int> labels;          // n
  std::vector<int> rot_labels;      // R, sampled-rotation mode only
  std::uint64_t negative_seed = 0;  // seeds hardest/simple/other-label draws
};

struct StepOptions {
  int stage = 1;
  LossTerms terms;
  LossWeights weights;
  bool cm_u_kept_only = true;
  bool bn_include_rotations = true;
  bool sharpen_targets = false;
  double sharpen_temperature = 0.4;
  bool simple_negative_fallback = false;
};

/// Gradient of the loss with respect to backbone features, for inspection.
template <class T>
struct StepTrace {
  Tensor<T> features, dfeatures;
};

/// Forward, losses and (when `backward`) gradients accumulated into the
/// model's parameter grads. Throws TrainingError on a non-finite total.
template <class T>
LossBreakdown compute_step(Model<T>& model, const StepBatch<T>& batch, const StepOptions& opt,
                           bool backward, StepTrace<T>* trace = nullptr);

// ---------------------------------------------------------------- checkpoints

using NamedTensors = std::vector<std::pair<std::string, const Tensor<float>*>>;

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
std::vector<std::pair<std::string, Tensor<float>>> load_tensors(const std::filesystem::path& path);

struct CheckpointMeta {
  std::uint64_t iteration = 0;
  int feature_dim = 0, num_classes = 0;
  std::string backbone_id;
  std::uint64_t seed = 0;
  int in_channels = 1, image_size = 28;
};

nlohmann::json to_json(const CheckpointMeta& m);
CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j);

/// params.bin + meta.json, plus optim.bin/state.json when resume data is given.
void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const CheckpointMeta& meta, const std::vector<Tensor<float>>* velocity,
                     const nlohmann::json* state);
/// Loads parameters and running statistics into an existing model.
CheckpointMeta load_checkpoint_params(const std::filesystem::path& dir, Model<float>& model);
/// Builds a model from the sidecar and loads it.
Model<float> load_checkpoint_model(const std::filesystem::path& dir, const TrainConfig& cfg);

/// Checkpoint subdirectories of a run, in iteration order.
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& run_dir);

struct AveragedAccuracy {
  double mean = 0;
  std::vector<double> per_checkpoint;
  std::size_t used = 0;
};

/// Mean top-1 accuracy of the last `last` checkpoints (metric averaging).
AveragedAccuracy evaluate_with_checkpoint_averaging(
    std::span<const std::filesystem::path> checkpoints, const TrainConfig& cfg,
    std::span<const Image> test, std::span<const int> labels, int last);

// ---------------------------------------------------------------- trainer

class Trainer {
 public:
  /// `run_dir` receives metrics.jsonl and checkpoints/; empty disables output.
  Trainer(TrainConfig cfg, const OpenSetDataset& data, std::filesystem::path run_dir);

  /// Runs until `until` completed iterations (default: the full schedule).
  void run(std::optional<std::uint64_t> until = std::nullopt);
  /// Restores model, optimizer and filter state; truncates the metrics log.
  void resume(const std::filesystem::path& checkpoint_dir);

  std::uint64_t iteration() const { return iteration_; }
  const TrainConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  const std::optional<FilterState>& filter_state() const { return filter_; }
  const std::vector<CleaningReport>& cleaning_reports() const { return reports_; }
  const MaskHandle& mask() const { return mask_; }
  const LossBreakdown& last_losses() const { return last_; }

  /// Device for tests and the acceptance suite: called after every step.
  std::function<void(std::uint64_t, const LossBreakdown&)> on_step;

 private:
  void step();
  void clean(int cycle);
  StepBatch<float> assemble(const BatchIndices& idx, int stage) const;
  void log_step(const LossBreakdown& l, int stage, double lr);
  void write_checkpoint();
  void append_log(const nlohmann::json& j);

  TrainConfig cfg_;
  const OpenSetDataset& data_;
  std::filesystem::path run_dir_;
  Model<float> model_;
  std::vector<Tensor<float>> velocity_;
  BatchSampler sampler_;
  MaskHandle mask_;
  std::optional<FilterState> filter_;
  std::vector<CleaningReport> reports_;
  std::uint64_t iteration_ = 0;
  LossBreakdown last_;
};

/// Report for a finished run from its directory alone: checkpoint-averaged
/// test accuracy, final-model test AUROC against the OOD test set, and the
/// cleaning history with the last cycle's histograms.
MetricReport evaluate_run(const std::filesystem::path& run_dir, const TrainConfig& cfg,
                          const OpenSetDataset& data, int last);

ModelConfig model_config(const TrainConfig& cfg, int num_classes, int channels, int image_size);

}  // namespace cmssl
