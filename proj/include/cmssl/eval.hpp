#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmssl/filter.hpp"
#include "cmssl/model.hpp"

namespace cmssl {

/// P(score_id > score_ood) over all pairs, ties counted 1/2 (rank statistic).
double auroc(std::span<const double> scores_id, std::span<const double> scores_ood);

/// Fraction of rows whose argmax equals the label.
template <class T>
double accuracy(const Tensor<T>& probs, std::span<const int> labels);

/// Top-1 accuracy of the model on a set of images, in batches.
double evaluate_accuracy(const Model<float>& model, std::span<const Image> images,
                         std::span<const int> labels, int batch_size = 256);

/// Matching score of each image with its own pseudo-label (the ID probability).
std::vector<double> id_scores(const Model<float>& model, std::span<const Image> images,
                              int batch_size = 256);

/// ID-vs-OOD AUROC of the matching score. Both sets must be non-empty.
double evaluate_auroc(const Model<float>& model, std::span<const Image> id_images,
                      std::span<const Image> ood_images);

struct EmbeddingRow {
  std::string id;
  std::string provenance;
  int label = -1;
  std::vector<float> feature;
};

/// Tab-separated: header "id provenance label f0 .. f{D-1}", one row per sample.
void write_embeddings(std::ostream& out, std::span<const EmbeddingRow> rows);
std::vector<EmbeddingRow> read_embeddings(std::istream& in);

/// Features of each image plus metadata columns; `labels` holds ground truth
/// or, when empty, pseudo-labels are assigned.
std::vector<EmbeddingRow> export_embeddings(const Model<float>& model,
                                            std::span<const Image> images,
                                            std::span<const std::string> ids,
                                            std::span<const std::string> provenance,
                                            std::span<const int> labels);

struct MetricReport {
  double accuracy_mean = 0, accuracy_std = 0;
  double auroc_mean = 0, auroc_std = 0;
  int seeds = 1;
  std::vector<double> accuracies, aurocs;
  std::vector<CleaningReport> cleaning;
  std::optional<ScoreHistograms> histograms;
};

/// Mean and population standard deviation over reports (one per seed).
MetricReport aggregate_seeds(std::span<const MetricReport> reports);

nlohmann::json to_json(const MetricReport& r);

}  // namespace cmssl
