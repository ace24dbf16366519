#include "cmssl/filter.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "cmssl/augment.hpp"

namespace cmssl {

using json = nlohmann::json;

std::string filter_mode_name(FilterMode m) {
  switch (m) {
    case FilterMode::kMatching: return "matching";
    case FilterMode::kConfidence: return "confidence";
    case FilterMode::kNone: return "none";
  }
  return "?";
}

FilterMode parse_filter_mode(const std::string& s) {
  if (s == "matching") return FilterMode::kMatching;
  if (s == "confidence") return FilterMode::kConfidence;
  if (s == "none") return FilterMode::kNone;
  throw ConfigError("unknown filter mode '" + s + "' (expected matching, confidence, none)");
}

template <class T>
std::vector<int> assign_pseudo_labels(const Tensor<T>& probs) {
  std::vector<int> out(probs.n());
  const int k = static_cast<int>(probs.stride());
  for (int i = 0; i < probs.n(); ++i) {
    const auto row = probs.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.begin() + k) - row.begin());
  }
  return out;
}

template std::vector<int> assign_pseudo_labels<float>(const Tensor<float>&);
template std::vector<int> assign_pseudo_labels<double>(const Tensor<double>&);

int score_bin(double s, int bins) {
  const double c = std::clamp(s, 0.0, 1.0);
  return std::min(static_cast<int>(std::floor(c * bins)), bins - 1);
}

OtsuResult otsu_threshold(std::span<const double> scores, int bins) {
  if (scores.size() < 2) throw InputError("otsu_threshold: needs at least 2 scores");
  if (bins < 2) throw InputError("otsu_threshold: needs at least 2 bins");
  std::vector<long> hist(bins, 0);
  for (double s : scores) ++hist[score_bin(s, bins)];
  const int occupied = static_cast<int>(std::count_if(hist.begin(), hist.end(), [](long c) { return c > 0; }));
  if (occupied == 1) {
    const int b = static_cast<int>(std::find_if(hist.begin(), hist.end(), [](long c) { return c > 0; }) - hist.begin());
    return {static_cast<double>(b) / bins, true};
  }
  using LD = long double;
  const LD total = static_cast<LD>(scores.size());
  LD sum_all = 0;
  for (int b = 0; b < bins; ++b) sum_all += hist[b] * ((b + 0.5L) / bins);
  LD n0 = 0, s0 = 0, best = -1;
  int best_k = 1;
  for (int k = 1; k < bins; ++k) {
    n0 += hist[k - 1];
    s0 += hist[k - 1] * ((k - 0.5L) / bins);
    const LD n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const LD diff = s0 / n0 - (sum_all - s0) / n1;
    const LD var = (n0 / total) * (n1 / total) * diff * diff;
    if (var > best * (1 + 1e-12L)) {
      best = var;
      best_k = k;
    }
  }
  return {static_cast<double>(best_k) / bins, false};
}

KeepMask make_keep_mask(std::span<const double> scores, double threshold) {
  KeepMask m(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) m[i] = scores[i] >= threshold ? 1 : 0;
  return m;
}

std::size_t FilterState::kept() const {
  return static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), 1));
}

json to_json(const FilterState& s) {
  std::string mask(s.keep_mask.size(), '0');
  for (std::size_t i = 0; i < s.keep_mask.size(); ++i) mask[i] = s.keep_mask[i] ? '1' : '0';
  return {{"scores", s.scores},         {"pseudo_labels", s.pseudo_labels},
          {"threshold", s.threshold},   {"keep_mask", mask},
          {"cycle_index", s.cycle_index}, {"degenerate", s.degenerate},
          {"fell_back", s.fell_back}};
}

FilterState filter_state_from_json(const json& j) {
  FilterState s;
  s.scores = j.at("scores").get<std::vector<double>>();
  s.pseudo_labels = j.at("pseudo_labels").get<std::vector<int>>();
  s.threshold = j.at("threshold");
  const std::string mask = j.at("keep_mask");
  s.keep_mask.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) s.keep_mask[i] = mask[i] == '1';
  s.cycle_index = j.at("cycle_index");
  s.degenerate = j.at("degenerate");
  s.fell_back = j.at("fell_back");
  return s;
}

FilterState run_cleaning_cycle(const Model<float>& model, std::span<const Image> pool,
                               FilterMode mode, int cycle_index, int bins, int batch_size) {
  if (mode == FilterMode::kNone) throw ConfigError("run_cleaning_cycle: filter mode is none");
  FilterState st;
  st.cycle_index = cycle_index;
  st.scores.resize(pool.size());
  st.pseudo_labels.resize(pool.size());
  for (std::size_t start = 0; start < pool.size(); start += batch_size) {
    const std::size_t end = std::min(pool.size(), start + batch_size);
    const auto x = to_tensor<float>(pool.subspan(start, end - start));
    const auto f = model.extract_features(x);
    const auto p = model.classify(f);
    const auto y = assign_pseudo_labels(p);
    std::vector<float> s;
    if (mode == FilterMode::kMatching) s = model.match_scores(f, y);
    for (std::size_t i = start; i < end; ++i) {
      const int r = static_cast<int>(i - start);
      st.pseudo_labels[i] = y[r];
      st.scores[i] = mode == FilterMode::kMatching ? s[r] : p.at(r, y[r]);
    }
  }
  if (pool.size() >= 2) {
    const auto otsu = otsu_threshold(st.scores, bins);
    st.threshold = otsu.threshold;
    st.degenerate = otsu.degenerate;
    if (otsu.degenerate)
      std::cerr << "warning: cleaning cycle " << cycle_index
                << ": all scores fell in one histogram bin\n";
  }
  st.keep_mask = make_keep_mask(st.scores, st.threshold);
  if (st.kept() == 0) {
    std::cerr << "warning: cleaning cycle " << cycle_index
              << " dropped every unlabeled sample; keeping the full pool\n";
    st.keep_mask.assign(pool.size(), 1);
    st.fell_back = true;
  }
  return st;
}

long Histogram::total() const {
  long t = 0;
  for (long c : counts) t += c;
  return t;
}

ScoreHistograms score_histogram(const FilterState& state, std::span<const HiddenTag> tags,
                                int bins) {
  if (tags.size() != state.scores.size())
    throw InputError("score_histogram: one provenance tag per pool entry required");
  ScoreHistograms h;
  for (Histogram* x : {&h.positive_id, &h.negative_id, &h.ood}) {
    x->bins = bins;
    x->counts.assign(bins, 0);
  }
  for (std::size_t i = 0; i < tags.size(); ++i) {
    Histogram& dst = tags[i].provenance == Provenance::kOod ? h.ood
                     : tags[i].true_class == state.pseudo_labels[i] ? h.positive_id
                                                                    : h.negative_id;
    ++dst.counts[score_bin(state.scores[i], bins)];
  }
  return h;
}

namespace {
json hist_json(const Histogram& h) { return {{"bins", h.bins}, {"counts", h.counts}}; }
Histogram hist_from(const json& j) {
  return {j.at("bins").get<int>(), j.at("counts").get<std::vector<long>>()};
}
}  // namespace

json to_json(const ScoreHistograms& h) {
  return {{"positive_id", hist_json(h.positive_id)},
          {"negative_id", hist_json(h.negative_id)},
          {"ood", hist_json(h.ood)}};
}

ScoreHistograms score_histograms_from_json(const json& j) {
  return {hist_from(j.at("positive_id")), hist_from(j.at("negative_id")), hist_from(j.at("ood"))};
}

CleaningReport make_cleaning_report(const FilterState& state, std::uint64_t iteration,
                                    const ProvenanceLedger* tags) {
  CleaningReport r;
  r.cycle = state.cycle_index;
  r.iteration = iteration;
  r.threshold = state.threshold;
  r.kept_count = state.kept();
  r.dropped_count = state.keep_mask.size() - r.kept_count;
  r.degenerate = state.degenerate;
  if (tags) {
    const auto all = tags->read_all();
    std::size_t ood = 0, dropped_ood = 0, kept_ood = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (all[i].provenance != Provenance::kOod) continue;
      ++ood;
      (state.keep_mask[i] ? kept_ood : dropped_ood) += 1;
    }
    r.precision = r.dropped_count ? static_cast<double>(dropped_ood) / r.dropped_count : 0.0;
    r.recall = ood ? static_cast<double>(dropped_ood) / ood : 0.0;
    r.ood_kept_fraction = ood ? static_cast<double>(kept_ood) / ood : 0.0;
    r.histograms = score_histogram(state, all);
  }
  return r;
}

json to_json(const CleaningReport& r) {
  json j = {{"event", "cleaning"},           {"cycle", r.cycle},
            {"iter", r.iteration},           {"threshold", r.threshold},
            {"kept_count", r.kept_count},    {"dropped_count", r.dropped_count},
            {"degenerate", r.degenerate}};
  if (r.precision) j["precision"] = *r.precision;
  if (r.recall) j["recall"] = *r.recall;
  if (r.ood_kept_fraction) j["ood_kept_fraction"] = *r.ood_kept_fraction;
  if (r.histograms) j["histograms"] = to_json(*r.histograms);
  return j;
}

}  // namespace cmssl
