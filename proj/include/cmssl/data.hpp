#pragma once

// Open-set dataset assembly, on-disk manifests and batch sampling.
//
// Provenance (ID vs OOD, and the true class of unlabeled ID samples) lives in
// a ProvenanceLedger kept apart from the unlabeled images. Every read of it is
// counted, and reads made while a LossScope is active are recorded as
// violations, which is what the firewall audit checks.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cmssl/image.hpp"
#include "cmssl/rng.hpp"

namespace cmssl {

enum class Provenance : std::uint8_t { kId, kOod };

std::string_view provenance_name(Provenance p);

// ---------------------------------------------------------------- sources

struct LabeledImages {
  std::vector<Image> images;
  std::vector<int> labels;
  std::size_t size() const { return images.size(); }
};

/// Reads an IDX image file (uint8, 3 dims) and its IDX label file; ".gz"
/// variants are read when the plain file is absent.
LabeledImages read_idx(const std::filesystem::path& images_file,
                       const std::filesystem::path& labels_file);

/// Dataset cache root: $CMSSL_DATA_ROOT, else "./data".
std::filesystem::path data_root();

/// "mnist" or "fashion-mnist" training split from the cache. Throws
/// InputError with a fetch instruction when the files are missing.
LabeledImages load_source(const std::string& name, const std::filesystem::path& root);

/// Binary PGM (1 channel) or PPM (3 channels), 8-bit.
void write_pnm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);

enum class NoiseKind { kGaussian, kUniform };

/// gaussian: per-pixel N(0.5, 0.25) clipped to [0, 1]; uniform: U[0, 1].
std::vector<Image> synth_noise_ood(NoiseKind kind, int count, int channels, int height, int width,
                                   Rng& rng);

// ---------------------------------------------------------------- splits

struct DatasetSpec {
  std::string name = "mnist-id5";
  std::string id_source = "mnist";
  /// Another source name, "gaussian", "uniform", or the id_source itself for
  /// the intra-dataset setting (OOD drawn from its other classes).
  std::string ood_source = "mnist";
  std::vector<int> id_classes{0, 1, 2, 3, 4};
  /// Source classes eligible as OOD; empty means every class not in id_classes.
  std::vector<int> ood_classes;
  int labels_per_class = 25;
  int val_per_class = 20;
  /// Test images per class; -1 takes everything left.
  int test_per_class = 100;
  int n_ood = 1000;
  int n_ood_val = 100;
  int n_ood_test = 500;
  std::uint64_t split_seed = 0;

  static DatasetSpec preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

/// Index lists into the sources. `val`/`test` index the ID test source when
/// one was supplied, otherwise the ID training source.
struct OpenSetSplit {
  std::vector<int> labeled, unlabeled_id, val, test;
  std::vector<int> ood_unlabeled, ood_val, ood_test;
  bool eval_from_test_source = false;
};

/// Splits by label vectors only. `id_test_labels` may be empty (val and test
/// are then carved from the training pool); `ood_labels` holds the class of
/// each OOD candidate (any value when the OOD source is unlabeled noise).
/// Class-balanced, seeded, and disjoint; throws InputError naming the shortfall.
OpenSetSplit build_openset_split(const DatasetSpec& spec, std::span<const int> id_train_labels,
                                 std::span<const int> id_test_labels, std::span<const int> ood_labels);

/// Ground truth for one unlabeled sample; only evaluation code may look.
struct HiddenTag {
  Provenance provenance = Provenance::kId;
  int true_class = -1;  // remapped ID class, -1 for OOD
};

class ProvenanceLedger {
 public:
  ProvenanceLedger() = default;
  explicit ProvenanceLedger(std::vector<HiddenTag> tags) : tags_(std::move(tags)) {}
  ProvenanceLedger(const ProvenanceLedger& o) : tags_(o.tags_) {}
  ProvenanceLedger& operator=(const ProvenanceLedger& o) {
    tags_ = o.tags_;
    return *this;
  }

  std::size_t size() const { return tags_.size(); }
  const HiddenTag& read(std::size_t i) const;
  std::vector<HiddenTag> read_all() const;

  std::uint64_t reads() const { return reads_.load(); }
  static std::uint64_t violations();
  static void reset_violations();

 private:
  std::vector<HiddenTag> tags_;
  mutable std::atomic<std::uint64_t> reads_{0};
};

/// Marks the current thread as computing a loss for its lifetime.
class LossScope {
 public:
  LossScope();
  ~LossScope();
  LossScope(const LossScope&) = delete;
  LossScope& operator=(const LossScope&) = delete;
  static bool active();
};

struct OpenSetDataset {
  DatasetSpec spec;
  int num_classes = 0;
  int channels = 1, image_size = 28;

  std::vector<Image> labeled;
  std::vector<int> labeled_labels;
  std::vector<Image> unlabeled;
  ProvenanceLedger unlabeled_tags;
  std::vector<Image> val;
  std::vector<int> val_labels;
  std::vector<Image> test;
  std::vector<int> test_labels;
  std::vector<Image> ood_val;
  std::vector<Image> ood_test;
};

/// Loads sources from `root` and materializes the split. Unlabeled order is
/// the ID remainder followed by the OOD pool, then shuffled with the split seed.
OpenSetDataset build_openset_dataset(const DatasetSpec& spec, const std::filesystem::path& root);

/// Same, from already loaded sources (tests use synthetic ones).
OpenSetDataset build_openset_dataset(const DatasetSpec& spec, const LabeledImages& id_train,
                                     const LabeledImages* id_test, const LabeledImages* ood);

// ---------------------------------------------------------------- manifests

/// One directory per split with manifest.jsonl ({path, label, provenance, truth})
/// and the image files. Byte-identical for identical input.
void write_manifests(const OpenSetDataset& ds, const std::filesystem::path& dir);
OpenSetDataset read_manifests(const std::filesystem::path& dir);

// ---------------------------------------------------------------- sampling

using KeepMask = std::vector<std::uint8_t>;

/// Holds the current keep mask; publish() swaps it in whole.
class MaskHandle {
 public:
  explicit MaskHandle(std::size_t pool_size)
      : mask_(std::make_shared<const KeepMask>(pool_size, 1)) {}
  std::shared_ptr<const KeepMask> load() const {
    std::lock_guard lock(mu_);
    return mask_;
  }
  void publish(KeepMask mask) {
    auto next = std::make_shared<const KeepMask>(std::move(mask));
    std::lock_guard lock(mu_);
    mask_ = std::move(next);
  }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const KeepMask> mask_;
};

struct BatchIndices {
  std::vector<int> labeled;       // into the labeled set
  std::vector<int> labels;
  std::vector<int> unlabeled;     // into the unlabeled pool, kept samples
  std::vector<int> extra;         // dropped samples used for rotation only
  bool fell_back = false;         // mask was empty; full pool used
};

/// Stateless in the iteration counter, so a resumed run draws the same
/// batches: labeled samples follow a per-epoch permutation, unlabeled ones are
/// drawn per iteration from the kept indices (without replacement when at
/// least m are kept, with replacement otherwise).
class BatchSampler {
 public:
  BatchSampler(std::vector<int> labels, std::size_t pool_size, int n, int m, std::uint64_t seed);

  int n() const { return n_; }
  int m() const { return m_; }

  /// `extra_count` dropped indices are added for the rotation-only stream.
  BatchIndices next_batch(std::uint64_t iteration, const KeepMask& keep, int extra_count = 0) const;

 private:
  const std::vector<int>& epoch_permutation(std::uint64_t epoch) const;

  std::vector<int> labels_;
  std::size_t pool_size_;
  int n_, m_;
  std::uint64_t seed_;
  mutable std::uint64_t cached_epoch_ = ~0ULL;
  mutable std::vector<int> cached_perm_;
};

}  // namespace cmssl
