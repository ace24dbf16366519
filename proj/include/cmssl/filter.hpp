#pragma once

// Pseudo-labelling, Otsu thresholding and the periodic cleaning pass that
// produces the keep mask for the unlabeled pool.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmssl/data.hpp"
#include "cmssl/model.hpp"

namespace cmssl {

enum class FilterMode { kMatching, kConfidence, kNone };

std::string filter_mode_name(FilterMode m);
FilterMode parse_filter_mode(const std::string& s);

/// argmax per row, lowest index on ties.
template <class T>
std::vector<int> assign_pseudo_labels(const Tensor<T>& probs);

struct OtsuResult {
  double threshold = 0;
  bool degenerate = false;  // every score fell in one bin
};

/// Equal-width histogram on [0, 1]; the threshold is the bin edge k/bins
/// maximizing w0 * w1 * (mu0 - mu1)^2 over bin-centre means, lowest on ties.
OtsuResult otsu_threshold(std::span<const double> scores, int bins = 256);

/// Histogram bin of a score in [0, 1].
int score_bin(double s, int bins);

/// keep[i] = scores[i] >= threshold.
KeepMask make_keep_mask(std::span<const double> scores, double threshold);

struct FilterState {
  std::vector<double> scores;
  std::vector<int> pseudo_labels;
  double threshold = 0;
  KeepMask keep_mask;
  int cycle_index = 0;
  bool degenerate = false;
  bool fell_back = false;  // mask would have been empty; all-true published

  std::size_t kept() const;
};

nlohmann::json to_json(const FilterState& s);
FilterState filter_state_from_json(const nlohmann::json& j);

/// Inference pass over the pool scoring each image (its un-jittered weak view)
/// with its pseudo-label: matching mode uses s(x, y_hat), confidence mode the
/// maximum class probability. The model is only read.
FilterState run_cleaning_cycle(const Model<float>& model, std::span<const Image> pool,
                               FilterMode mode, int cycle_index, int bins = 256,
                               int batch_size = 256);

struct Histogram {
  int bins = 20;
  std::vector<long> counts;

  long total() const;
  bool operator==(const Histogram&) const = default;
};

struct ScoreHistograms {
  Histogram positive_id, negative_id, ood;
  bool operator==(const ScoreHistograms&) const = default;
};

/// Positive ID: ID samples whose pseudo-label is correct; negative ID: wrong.
ScoreHistograms score_histogram(const FilterState& state, std::span<const HiddenTag> tags,
                                int bins = 20);

nlohmann::json to_json(const ScoreHistograms& h);
ScoreHistograms score_histograms_from_json(const nlohmann::json& j);

struct CleaningReport {
  int cycle = 0;
  std::uint64_t iteration = 0;
  double threshold = 0;
  std::size_t kept_count = 0, dropped_count = 0;
  bool degenerate = false;
  // With provenance: OOD rejection quality and the OOD fraction kept.
  std::optional<double> precision, recall, ood_kept_fraction;
  std::optional<ScoreHistograms> histograms;
};

CleaningReport make_cleaning_report(const FilterState& state, std::uint64_t iteration,
                                    const ProvenanceLedger* tags);

nlohmann::json to_json(const CleaningReport& r);

}  // namespace cmssl
