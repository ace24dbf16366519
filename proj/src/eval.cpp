#include "cmssl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cmssl/augment.hpp"

namespace cmssl {

using json = nlohmann::json;

double auroc(std::span<const double> scores_id, std::span<const double> scores_ood) {
  if (scores_id.empty() || scores_ood.empty()) throw InputError("auroc: both score sets must be non-empty");
  struct Item {
    double s;
    bool id;
  };
  std::vector<Item> all;
  all.reserve(scores_id.size() + scores_ood.size());
  for (double s : scores_id) all.push_back({s, true});
  for (double s : scores_ood) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.s < b.s; });
  // Sum of mid-ranks of the ID scores (Mann-Whitney U).
  double rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].s == all[i].s) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2 + 1;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].id) rank_sum += mid;
    i = j;
  }
  const double n1 = static_cast<double>(scores_id.size()), n0 = static_cast<double>(scores_ood.size());
  return (rank_sum - n1 * (n1 + 1) / 2) / (n1 * n0);
}

template <class T>
double accuracy(const Tensor<T>& probs, std::span<const int> labels) {
  if (probs.n() < 1) throw InputError("accuracy: empty test set");
  if (static_cast<int>(labels.size()) != probs.n()) throw InputError("accuracy: label count mismatch");
  const auto pred = assign_pseudo_labels(probs);
  long hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

template double accuracy<float>(const Tensor<float>&, std::span<const int>);
template double accuracy<double>(const Tensor<double>&, std::span<const int>);

double evaluate_accuracy(const Model<float>& model, std::span<const Image> images,
                         std::span<const int> labels, int batch_size) {
  if (images.empty()) throw InputError("evaluate: empty test set");
  if (labels.size() != images.size()) throw InputError("evaluate: label count mismatch");
  long hit = 0;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    const auto p = model.classify(model.extract_features(to_tensor<float>(images.subspan(start, end - start))));
    const auto pred = assign_pseudo_labels(p);
    for (std::size_t i = start; i < end; ++i) hit += pred[i - start] == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(images.size());
}

std::vector<double> id_scores(const Model<float>& model, std::span<const Image> images,
                              int batch_size) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    const auto f = model.extract_features(to_tensor<float>(images.subspan(start, end - start)));
    const auto y = assign_pseudo_labels(model.classify(f));
    for (float s : model.match_scores(f, y)) out.push_back(s);
  }
  return out;
}

double evaluate_auroc(const Model<float>& model, std::span<const Image> id_images,
                      std::span<const Image> ood_images) {
  return auroc(id_scores(model, id_images), id_scores(model, ood_images));
}

void write_embeddings(std::ostream& out, std::span<const EmbeddingRow> rows) {
  const std::size_t d = rows.empty() ? 0 : rows[0].feature.size();
  out << "id\tprovenance\tlabel";
  for (std::size_t j = 0; j < d; ++j) out << "\tf" << j;
  out << '\n';
  out << std::setprecision(9);
  for (const auto& r : rows) {
    if (r.feature.size() != d) throw InputError("write_embeddings: ragged feature rows");
    out << r.id << '\t' << r.provenance << '\t' << r.label;
    for (float v : r.feature) out << '\t' << v;
    out << '\n';
  }
}

std::vector<EmbeddingRow> read_embeddings(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("read_embeddings: missing header");
  const auto columns = std::count(line.begin(), line.end(), '\t') + 1;
  if (columns < 3) throw InputError("read_embeddings: header needs id, provenance, label");
  std::vector<EmbeddingRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    EmbeddingRow r;
    std::string field;
    std::getline(s, r.id, '\t');
    std::getline(s, r.provenance, '\t');
    std::getline(s, field, '\t');
    r.label = std::stoi(field);
    while (std::getline(s, field, '\t')) r.feature.push_back(std::stof(field));
    if (static_cast<long>(r.feature.size()) != columns - 3)
      throw InputError("read_embeddings: row width differs from header");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<EmbeddingRow> export_embeddings(const Model<float>& model, std::span<const Image> images,
                                            std::span<const std::string> ids,
                                            std::span<const std::string> provenance,
                                            std::span<const int> labels) {
  if (images.empty()) throw InputError("export_embeddings: no samples");
  if (ids.size() != images.size() || provenance.size() != images.size() ||
      (!labels.empty() && labels.size() != images.size()))
    throw InputError("export_embeddings: metadata length mismatch");
  std::vector<EmbeddingRow> rows;
  const std::size_t batch = 256;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    const auto f = model.extract_features(to_tensor<float>(images.subspan(start, end - start)));
    std::vector<int> pseudo;
    if (labels.empty()) pseudo = assign_pseudo_labels(model.classify(f));
    for (std::size_t i = start; i < end; ++i) {
      const auto row = f.row(static_cast<int>(i - start));
      rows.push_back({ids[i], provenance[i], labels.empty() ? pseudo[i - start] : labels[i],
                      {row.begin(), row.end()}});
    }
  }
  return rows;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  // Sorted so that the result does not depend on report order.
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
  double var = 0;
  for (double x : s) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / s.size())};
}

}  // namespace

MetricReport aggregate_seeds(std::span<const MetricReport> reports) {
  if (reports.empty()) throw InputError("aggregate_seeds: no reports");
  MetricReport out;
  out.seeds = 0;
  for (const auto& r : reports) {
    out.accuracies.push_back(r.accuracy_mean);
    out.aurocs.push_back(r.auroc_mean);
    out.seeds += r.seeds;
  }
  std::tie(out.accuracy_mean, out.accuracy_std) = mean_std(out.accuracies);
  std::tie(out.auroc_mean, out.auroc_std) = mean_std(out.aurocs);
  std::sort(out.accuracies.begin(), out.accuracies.end());
  std::sort(out.aurocs.begin(), out.aurocs.end());
  return out;
}

json to_json(const MetricReport& r) {
  json j = {{"accuracy", {{"mean", r.accuracy_mean}, {"std", r.accuracy_std}}},
            {"auroc", {{"mean", r.auroc_mean}, {"std", r.auroc_std}}},
            {"seeds", r.seeds},
            {"accuracies", r.accuracies},
            {"aurocs", r.aurocs}};
  json cycles = json::array();
  for (const auto& c : r.cleaning) {
    json cj = to_json(c);
    cj.erase("histograms");
    cycles.push_back(cj);
  }
  j["cleaning"] = cycles;
  if (r.histograms) j["histograms"] = to_json(*r.histograms);
  return j;
}

}  // namespace cmssl
