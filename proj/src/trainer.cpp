#include "cmssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include "cmssl/eval.hpp"

namespace cmssl {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- config

LossTerms TrainConfig::terms() const {
  LossTerms t;
  t.ce = true;
  t.cc = enable_consistency;
  t.rot = enable_rotation;
  t.cm_l = enable_matching;
  t.cm_u = enable_matching && enable_cm_u;
  return t;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  need(stage1_iters >= 0 && stage2_iters >= 0 && total_iters() > 0, "iteration counts must be positive");
  need(cleaning_cycle > 0, "cleaning_cycle must be positive");
  need(n > 0, "n must be positive");
  need(m >= 0, "m must be non-negative");
  need(checkpoint_every > 0 && log_every > 0 && eval_every > 0, "intervals must be positive");
  need(eval_every % log_every == 0, "eval_every must be a multiple of log_every");
  need(eval_avg_last > 0, "eval_avg_last must be positive");
  need(lr0 > 0 && momentum >= 0 && momentum < 1 && weight_decay >= 0, "bad optimizer settings");
  need(rotations_per_image == 1 || rotations_per_image == 4, "rotations_per_image must be 1 or 4");
  need(otsu_bins >= 2, "otsu_bins must be >= 2");
  need(feature_dim > 0, "feature_dim must be positive");
  need(!(filter_mode == FilterMode::kMatching && !enable_matching),
       "filter_mode=matching needs the matching head (enable_matching)");
  need(m > 0 || (!enable_consistency && !enable_rotation && !(enable_matching && enable_cm_u)),
       "m = 0 leaves the unlabeled terms without samples");
  need(sharpen_temperature > 0, "sharpen_temperature must be positive");
}

TrainConfig TrainConfig::full_scale() { return {}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.stage1_iters = 2000;
  c.stage2_iters = 8000;
  c.cleaning_cycle = 1000;
  c.n = 16;
  c.m = 48;
  c.checkpoint_every = 250;
  c.log_every = 50;
  c.eval_every = 250;
  c.backbone = "small-resnet";
  c.augment.flip_probability = 0.0;
  return c;
}

void TrainConfig::apply_method(const std::string& method) {
  auto baseline = [this] {
    enable_matching = false;
    enable_cm_u = false;
    enable_warmup = false;
    filter_mode = FilterMode::kNone;
  };
  if (method == "full") return;
  if (method == "supervised") {
    baseline();
    enable_consistency = false;
    enable_rotation = false;
  } else if (method == "uda") {
    baseline();
    enable_rotation = false;
  } else if (method == "uda-ss") {
    baseline();
  } else if (method == "confidence") {
    filter_mode = FilterMode::kConfidence;
  } else if (method == "no-ss") {
    enable_rotation = false;
  } else if (method == "no-warmup") {
    enable_warmup = false;
  } else if (method == "no-cmu") {
    enable_cm_u = false;
  } else {
    throw ConfigError("unknown method '" + method +
                      "' (expected full, supervised, uda, uda-ss, confidence, no-ss, no-warmup, no-cmu)");
  }
}

ModelConfig model_config(const TrainConfig& cfg, int num_classes, int channels, int image_size) {
  ModelConfig mc;
  mc.backbone = BackboneConfig::preset(cfg.backbone, channels, image_size, cfg.feature_dim);
  mc.num_classes = num_classes;
  mc.label_embed_bias = cfg.label_embed_bias;
  return mc;
}

double cosine_lr(double lr0, std::uint64_t t, std::uint64_t total) {
  if (total == 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

template <class T>
void sgd_step(std::span<Param<T>* const> params, std::vector<Tensor<T>>& velocity, double lr,
              double momentum, double weight_decay) {
  if (velocity.size() != params.size()) {
    velocity.clear();
    for (auto* p : params) velocity.emplace_back(p->value.n(), p->value.c(), p->value.h(), p->value.w());
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k];
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* v = velocity[k].data();
    const T mu = static_cast<T>(momentum), wd = p.decay ? static_cast<T>(weight_decay) : T(0);
    const T eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * w[i];
      w[i] -= eta * v[i];
    }
  }
}

template void sgd_step<float>(std::span<Param<float>* const>, std::vector<Tensor<float>>&, double,
                              double, double);
template void sgd_step<double>(std::span<Param<double>* const>, std::vector<Tensor<double>>&,
                               double, double, double);

// ---------------------------------------------------------------- step

int BatchLayout::rotation_row(int g, int j) const {
  if (rotations == 1) return main_rows() + g;
  if (j == 0) return g < B() ? g : B() * (strong ? 2 : 1) + (g - B());
  return main_rows() + (j - 1) * R() + g;
}

namespace {

template <class T>
Tensor<T> slice_rows(const Tensor<T>& src, int begin, int end) {
  Tensor<T> out(end - begin, src.c(), src.h(), src.w());
  std::copy(src.data() + begin * src.stride(), src.data() + end * src.stride(), out.data());
  return out;
}

template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.n() == 0) return a;
  if (a.n() == 0) return b;
  Tensor<T> out(a.n() + b.n(), a.c(), a.h(), a.w());
  std::copy(a.vec().begin(), a.vec().end(), out.data());
  std::copy(b.vec().begin(), b.vec().end(), out.data() + a.size());
  return out;
}

template <class T>
void add_rows(Tensor<T>& dst, int offset, const Tensor<T>& src, double scale) {
  T* d = dst.data() + offset * dst.stride();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += static_cast<T>(scale * src[i]);
}

template <class T>
Tensor<T> sharpen(const Tensor<T>& p, double temperature) {
  Tensor<T> out = p;
  for (int i = 0; i < p.n(); ++i) {
    auto row = out.row(i);
    double z = 0;
    for (auto& v : row) z += (v = static_cast<T>(std::pow(static_cast<double>(v), 1.0 / temperature)));
    for (auto& v : row) v = static_cast<T>(v / z);
  }
  return out;
}

}  // namespace

template <class T>
LossBreakdown compute_step(Model<T>& model, const StepBatch<T>& b, const StepOptions& opt,
                           bool backward, StepTrace<T>* trace) {
  LossScope scope;
  const BatchLayout& L = b.layout;
  const int K = model.num_classes();
  const int main_rows = L.main_rows(), rot_rows = L.rot_rows();
  if (b.main_images.n() != main_rows || b.rot_images.n() != rot_rows)
    throw InputError("compute_step: image rows do not match the batch layout");
  if (static_cast<int>(b.labels.size()) != L.n) throw InputError("compute_step: one label per labeled row");

  auto& backbone = model.backbone();
  const bool joint = opt.bn_include_rotations || rot_rows == 0;
  typename Backbone<T>::Tape tape_all, tape_main, tape_rot;
  Tensor<T> F;
  if (joint) {
    backbone.forward_train(concat_rows(b.main_images, b.rot_images), tape_all, F);
  } else {
    Tensor<T> fm, fr;
    backbone.forward_train(b.main_images, tape_main, fm);
    backbone.forward_train(b.rot_images, tape_rot, fr);
    F = concat_rows(fm, fr);
  }
  const int D = static_cast<int>(F.stride());
  Tensor<T> dF(F.n(), D);
  Rng neg_rng(b.negative_seed);
  LossComponents comps;
  const bool stage2 = opt.stage == 2;

  // K-way head over the main rows.
  const Tensor<T> Fm = rot_rows == 0 ? F : slice_rows(F, 0, main_rows);
  Tensor<T> logits;
  model.classifier().forward(Fm, logits);
  const Tensor<T> probs = softmax_rows(logits);
  Tensor<T> dprobs(main_rows, K);
  bool classifier_grad = false;

  if (opt.terms.ce) {
    Tensor<T> d;
    comps.ce = supervised_ce(slice_rows(probs, 0, L.n), b.labels, &d);
    add_rows(dprobs, 0, d, opt.weights.ce);
    classifier_grad = true;
  }
  if (stage2 && opt.terms.cc) {
    if (!L.strong) throw ConfigError("compute_step: consistency needs strong views");
    Tensor<T> weak = slice_rows(probs, 0, L.B());
    if (opt.sharpen_targets) weak = sharpen(weak, opt.sharpen_temperature);
    Tensor<T> d;
    comps.cc = consistency_kl(weak, slice_rows(probs, L.B(), 2 * L.B()), &d);
    add_rows(dprobs, L.B(), d, opt.weights.cc);
    classifier_grad = true;
  }

  // Matching head: labeled pos | hard | simple, then unlabeled pseudo | other.
  std::vector<int> mrows, mlabels;
  if (opt.terms.cm_l) {
    std::vector<int> hard(L.n), simple(L.n);
    for (int i = 0; i < L.n; ++i) {
      hard[i] = mine_hardest_negative<T>(probs.row(i), b.labels[i]);
      simple[i] = sample_simple_negative(b.labels[i], hard[i], K, neg_rng, opt.simple_negative_fallback);
    }
    const std::vector<int>* lists[] = {&b.labels, &hard, &simple};
    for (const auto* lab : lists)
      for (int i = 0; i < L.n; ++i) {
        mrows.push_back(i);
        mlabels.push_back((*lab)[i]);
      }
  }
  const int labeled_match = static_cast<int>(mrows.size());
  std::vector<int> urows;
  if (stage2 && opt.terms.cm_u) {
    for (int i = L.n; i < L.B(); ++i) urows.push_back(i);
    if (!opt.cm_u_kept_only && L.rotations == 4)
      for (int g = L.B(); g < L.R(); ++g) urows.push_back(L.rotation_row(g, 0));
    std::vector<int> pseudo, other;
    for (int r : urows) {
      const auto row = probs.row(r);
      const int y = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      pseudo.push_back(y);
      other.push_back(sample_other_label(y, K, neg_rng));
    }
    for (const std::vector<int>* lab : {&pseudo, &other})
      for (std::size_t i = 0; i < urows.size(); ++i) {
        mrows.push_back(urows[i]);
        mlabels.push_back((*lab)[i]);
      }
  }
  if (!mrows.empty()) {
    const Tensor<T> Fmatch = gather_rows(F, mrows);
    typename MatchingHead<T>::Tape mt;
    model.matcher().forward(Fmatch, mlabels, mt);
    std::vector<T> dscores(mrows.size(), T(0));
    const std::span<const T> s(mt.scores);
    const std::span<T> ds(dscores);
    if (labeled_match > 0) {
      const std::size_t n = L.n;
      comps.cm_l = matching_loss_labeled<T>(s.subspan(0, n), s.subspan(n, n), s.subspan(2 * n, n),
                                            ds.subspan(0, n), ds.subspan(n, n), ds.subspan(2 * n, n));
      for (int i = 0; i < labeled_match; ++i) dscores[i] *= static_cast<T>(opt.weights.cm_l);
    }
    if (!urows.empty()) {
      const std::size_t u = urows.size(), o = labeled_match;
      comps.cm_u = matching_entropy_unlabeled<T>(s.subspan(o, u), s.subspan(o + u, u),
                                                 ds.subspan(o, u), ds.subspan(o + u, u));
      for (std::size_t i = o; i < dscores.size(); ++i) dscores[i] *= static_cast<T>(opt.weights.cm_u);
    }
    if (backward) scatter_add_rows(model.matcher().backward(mt, dscores), mrows, dF);
  }

  if (opt.terms.rot && L.rotations > 0) {
    std::vector<int> rrows, rlabels;
    for (int g = 0; g < L.R(); ++g) {
      if (L.rotations == 4) {
        for (int j = 0; j < 4; ++j) {
          rrows.push_back(L.rotation_row(g, j));
          rlabels.push_back(j);
        }
      } else {
        rrows.push_back(L.rotation_row(g, 0));
        rlabels.push_back(b.rot_labels.at(g));
      }
    }
    const Tensor<T> Fr = gather_rows(F, rrows);
    Tensor<T> rl;
    model.rotation_head().forward(Fr, rl);
    const Tensor<T> q = softmax_rows(rl);
    Tensor<T> d;
    comps.rot = L.rotations == 4 ? rotation_ce(q, rlabels, &d) : supervised_ce(q, rlabels, &d);
    if (backward) {
      for (auto& v : d.vec()) v = static_cast<T>(v * opt.weights.rot);
      Tensor<T> dFr;
      model.rotation_head().backward(Fr, softmax_backward(q, d), &dFr);
      scatter_add_rows(dFr, rrows, dF);
    }
  }

  const LossBreakdown out = compose(opt.stage, comps, opt.terms, opt.weights);
  if (!std::isfinite(out.total))
    throw TrainingError("non-finite loss (ce=" + std::to_string(out.ce) + " cc=" + std::to_string(out.cc) +
                        " rot=" + std::to_string(out.rot) + " cm_l=" + std::to_string(out.cm_l) +
                        " cm_u=" + std::to_string(out.cm_u) + ")");

  if (backward) {
    if (classifier_grad) {
      Tensor<T> dFm;
      model.classifier().backward(Fm, softmax_backward(probs, dprobs), &dFm);
      add_rows(dF, 0, dFm, 1.0);
    }
    if (joint) {
      backbone.backward(tape_all, dF);
    } else {
      backbone.backward(tape_main, slice_rows(dF, 0, main_rows));
      backbone.backward(tape_rot, slice_rows(dF, main_rows, main_rows + rot_rows));
    }
  }
  if (trace) {
    trace->features = F;
    trace->dfeatures = dF;
  }
  return out;
}

template LossBreakdown compute_step<float>(Model<float>&, const StepBatch<float>&, const StepOptions&,
                                           bool, StepTrace<float>*);
template LossBreakdown compute_step<double>(Model<double>&, const StepBatch<double>&,
                                            const StepOptions&, bool, StepTrace<double>*);

// ---------------------------------------------------------------- tensor files

namespace {

constexpr char kTensorMagic[8] = {'C', 'M', 'S', 'S', 'L', 'T', '1', '\0'};

template <class V>
void put(std::ostream& o, const V& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& i) {
  V v{};
  i.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!i) throw InputError("truncated tensor file");
  return v;
}

}  // namespace

void save_tensors(const fs::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(kTensorMagic, sizeof kTensorMagic);
  put(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    for (int d : t->shape()) put(out, static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
  }
  if (!out) throw InputError("failed writing " + path.string());
}

std::vector<std::pair<std::string, Tensor<float>>> load_tensors(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kTensorMagic, sizeof magic) != 0)
    throw InputError(path.string() + ": not a tensor file");
  const auto count = get<std::uint32_t>(in);
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::array<int, 4> s{};
    for (auto& d : s) d = get<std::int32_t>(in);
    Tensor<float> t(s[0], s[1], s[2], s[3]);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw InputError(path.string() + ": truncated tensor " + name);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

json to_json(const CheckpointMeta& m) {
  return {{"iteration", m.iteration}, {"D", m.feature_dim},      {"K", m.num_classes},
          {"backbone_id", m.backbone_id}, {"seed", m.seed},      {"in_channels", m.in_channels},
          {"image_size", m.image_size}};
}

CheckpointMeta checkpoint_meta_from_json(const json& j) {
  CheckpointMeta m;
  m.iteration = j.at("iteration");
  m.feature_dim = j.at("D");
  m.num_classes = j.at("K");
  m.backbone_id = j.at("backbone_id");
  m.seed = j.at("seed");
  m.in_channels = j.value("in_channels", 1);
  m.image_size = j.value("image_size", 28);
  return m;
}

namespace {

NamedTensors model_tensors(const Model<float>& model) {
  NamedTensors t;
  for (const auto* p : model.params()) t.emplace_back(p->name, &p->value);
  for (const auto& [name, b] : model.buffers()) t.emplace_back(name, b);
  return t;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot open " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Model<float>& model, const CheckpointMeta& meta,
                     const std::vector<Tensor<float>>* velocity, const json* state) {
  fs::create_directories(dir);
  save_tensors(dir / "params.bin", model_tensors(model));
  write_json(dir / "meta.json", to_json(meta));
  if (velocity) {
    NamedTensors v;
    const auto params = model.params();
    for (std::size_t i = 0; i < velocity->size(); ++i) v.emplace_back(params[i]->name, &(*velocity)[i]);
    save_tensors(dir / "optim.bin", v);
  }
  if (state) write_json(dir / "state.json", *state);
}

CheckpointMeta load_checkpoint_params(const fs::path& dir, Model<float>& model) {
  const auto meta = checkpoint_meta_from_json(read_json(dir / "meta.json"));
  if (meta.feature_dim != model.feature_dim() || meta.num_classes != model.num_classes() ||
      meta.backbone_id != model.config().backbone.id)
    throw ConfigError("checkpoint " + dir.string() + " does not match the model (D, K or backbone)");
  auto loaded = load_tensors(dir / "params.bin");
  std::size_t k = 0;
  auto assign = [&](const std::string& name, Tensor<float>& dst) {
    if (k >= loaded.size() || loaded[k].first != name || !loaded[k].second.same_shape(dst))
      throw InputError("checkpoint " + dir.string() + ": unexpected tensor at position " +
                       std::to_string(k) + " (wanted " + name + ")");
    dst = std::move(loaded[k].second);
    ++k;
  };
  for (auto* p : model.params()) assign(p->name, p->value);
  for (auto& [name, b] : model.buffers()) assign(name, *b);
  return meta;
}

Model<float> load_checkpoint_model(const fs::path& dir, const TrainConfig& cfg) {
  const auto meta = checkpoint_meta_from_json(read_json(dir / "meta.json"));
  TrainConfig c = cfg;
  c.backbone = meta.backbone_id;
  c.feature_dim = meta.feature_dim;
  Model<float> model(model_config(c, meta.num_classes, meta.in_channels, meta.image_size), meta.seed);
  load_checkpoint_params(dir, model);
  return model;
}

std::vector<fs::path> list_checkpoints(const fs::path& run_dir) {
  std::vector<std::pair<std::uint64_t, fs::path>> found;
  const fs::path root = run_dir / "checkpoints";
  if (!fs::exists(root)) return {};
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_directory() || !fs::exists(e.path() / "meta.json")) continue;
    found.emplace_back(checkpoint_meta_from_json(read_json(e.path() / "meta.json")).iteration, e.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [it, p] : found) out.push_back(p);
  return out;
}

AveragedAccuracy evaluate_with_checkpoint_averaging(std::span<const fs::path> checkpoints,
                                                    const TrainConfig& cfg,
                                                    std::span<const Image> test,
                                                    std::span<const int> labels, int last) {
  if (test.empty()) throw InputError("checkpoint averaging: empty test set");
  if (checkpoints.empty()) throw InputError("checkpoint averaging: no checkpoints");
  if (static_cast<int>(checkpoints.size()) < last)
    std::cerr << "warning: only " << checkpoints.size() << " checkpoints, averaging all of them\n";
  const std::size_t use = std::min<std::size_t>(checkpoints.size(), static_cast<std::size_t>(last));
  AveragedAccuracy out;
  out.used = use;
  for (std::size_t i = checkpoints.size() - use; i < checkpoints.size(); ++i) {
    const auto model = load_checkpoint_model(checkpoints[i], cfg);
    out.per_checkpoint.push_back(evaluate_accuracy(model, test, labels));
  }
  double s = 0;
  for (double a : out.per_checkpoint) s += a;
  out.mean = s / static_cast<double>(use);
  return out;
}

// ---------------------------------------------------------------- trainer

namespace {

constexpr std::uint64_t kUnlabeledKey = 1ULL << 40;

CleaningReport report_from_json(const json& j) {
  CleaningReport r;
  r.cycle = j.at("cycle");
  r.iteration = j.at("iter");
  r.threshold = j.at("threshold");
  r.kept_count = j.at("kept_count");
  r.dropped_count = j.at("dropped_count");
  r.degenerate = j.at("degenerate");
  if (j.contains("precision")) r.precision = j["precision"].get<double>();
  if (j.contains("recall")) r.recall = j["recall"].get<double>();
  if (j.contains("ood_kept_fraction")) r.ood_kept_fraction = j["ood_kept_fraction"].get<double>();
  if (j.contains("histograms")) r.histograms = score_histograms_from_json(j["histograms"]);
  return r;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const OpenSetDataset& data, fs::path run_dir)
    : cfg_(std::move(cfg)),
      data_(data),
      run_dir_(std::move(run_dir)),
      sampler_(data.labeled_labels, data.unlabeled.size(), cfg_.n, cfg_.m, cfg_.seed),
      mask_(data.unlabeled.size()) {
  cfg_.validate();
  model_ = Model<float>(model_config(cfg_, data.num_classes, data.channels, data.image_size), cfg_.seed);
  if (!run_dir_.empty()) fs::create_directories(run_dir_ / "checkpoints");
}

void Trainer::append_log(const json& j) {
  if (run_dir_.empty()) return;
  std::ofstream out(run_dir_ / "metrics.jsonl", std::ios::app);
  out << j.dump() << '\n';
}

void Trainer::clean(int cycle) {
  FilterState st = run_cleaning_cycle(model_, data_.unlabeled, cfg_.filter_mode, cycle, cfg_.otsu_bins);
  mask_.publish(st.keep_mask);
  // Evaluation context: provenance is allowed here, never inside compute_step.
  CleaningReport rep = make_cleaning_report(st, iteration_, &data_.unlabeled_tags);
  append_log(to_json(rep));
  reports_.push_back(std::move(rep));
  filter_ = std::move(st);
}

StepBatch<float> Trainer::assemble(const BatchIndices& idx, int stage) const {
  const LossTerms terms = cfg_.terms();
  const bool uses_unlabeled =
      terms.rot || (stage == 2 && (terms.cc || terms.cm_u));
  StepBatch<float> b;
  BatchLayout& L = b.layout;
  L.n = cfg_.n;
  L.m = uses_unlabeled ? static_cast<int>(idx.unlabeled.size()) : 0;
  L.r = uses_unlabeled && terms.rot ? static_cast<int>(idx.extra.size()) : 0;
  L.strong = stage == 2 && terms.cc;
  L.rotations = terms.rot ? cfg_.rotations_per_image : 0;
  b.labels = idx.labels;
  b.negative_seed = derive_seed(cfg_.seed, {static_cast<std::uint64_t>(Stream::kNegatives), iteration_});

  const int R = L.R();
  std::vector<const Image*> src(R);
  std::vector<std::uint64_t> keys(R);
  for (int g = 0; g < R; ++g) {
    if (g < L.n) {
      src[g] = &data_.labeled[idx.labeled[g]];
      keys[g] = idx.labeled[g];
    } else {
      const int u = g < L.B() ? idx.unlabeled[g - L.n] : idx.extra[g - L.B()];
      src[g] = &data_.unlabeled[u];
      keys[g] = kUnlabeledKey + u;
    }
  }
  if (L.rotations == 1) {
    b.rot_labels.resize(R);
    for (int g = 0; g < R; ++g) {
      Rng rng = make_rng(cfg_.seed, Stream::kRotationDraw, {iteration_, static_cast<std::uint64_t>(g)});
      b.rot_labels[g] = uniform_int(rng, 0, 3);
    }
  }
  const int C = data_.channels, S = data_.image_size;
  b.main_images.resize(L.main_rows(), C, S, S);
  b.rot_images.resize(L.rot_rows(), C, S, S);
  auto put_row = [](Tensor<float>& t, int row, const Image& im) {
    std::copy(im.pixels.begin(), im.pixels.end(), t.data() + row * t.stride());
  };
  const int main_rows = L.main_rows();
#pragma omp parallel for schedule(dynamic)
  for (int g = 0; g < R; ++g) {
    const bool in_batch = g < L.B();
    const ViewSet v = make_views(*src[g], cfg_.seed, keys[g], iteration_, cfg_.augment,
                                 in_batch && L.strong, L.rotations > 0);
    if (in_batch) put_row(b.main_images, g, v.weak);
    if (in_batch && L.strong) put_row(b.main_images, L.strong_row(g), v.strong);
    if (L.rotations == 4) {
      if (!in_batch) put_row(b.main_images, L.rotation_row(g, 0), v.rotations[0]);
      for (int j = 1; j < 4; ++j) put_row(b.rot_images, L.rotation_row(g, j) - main_rows, v.rotations[j]);
    } else if (L.rotations == 1) {
      put_row(b.rot_images, L.rotation_row(g, 0) - main_rows, v.rotations[b.rot_labels[g]]);
    }
  }
  return b;
}

void Trainer::log_step(const LossBreakdown& l, int stage, double lr) {
  const auto mask = mask_.load();
  const double kept = mask->empty() ? 1.0
                                    : static_cast<double>(std::count(mask->begin(), mask->end(), 1)) /
                                          static_cast<double>(mask->size());
  json j = {{"iter", iteration_}, {"stage", stage}, {"lr", lr},       {"ce", l.ce},
            {"cc", l.cc},         {"rot", l.rot},   {"cm_l", l.cm_l}, {"cm_u", l.cm_u},
            {"total", l.total},   {"kept_frac", kept}};
  if (iteration_ % cfg_.eval_every == 0) {
    if (!data_.val.empty()) j["val_acc"] = evaluate_accuracy(model_, data_.val, data_.val_labels);
    if (!data_.val.empty() && !data_.ood_val.empty())
      j["auroc"] = evaluate_auroc(model_, data_.val, data_.ood_val);
  }
  append_log(j);
}

void Trainer::write_checkpoint() {
  if (run_dir_.empty()) return;
  std::ostringstream name;
  name << "iter_" << std::setw(8) << std::setfill('0') << iteration_;
  CheckpointMeta meta{iteration_,         model_.feature_dim(), model_.num_classes(),
                      cfg_.backbone,      cfg_.seed,            data_.channels,
                      data_.image_size};
  json reports = json::array();
  for (const auto& r : reports_) reports.push_back(to_json(r));
  json state = {{"iteration", iteration_},
                {"filter", filter_ ? to_json(*filter_) : json(nullptr)},
                {"cleaning_reports", reports},
                {"rng", {{"scheme", "counter-splitmix64"}, {"seed", cfg_.seed}}}};
  save_checkpoint(run_dir_ / "checkpoints" / name.str(), model_, meta, &velocity_, &state);
}

void Trainer::step() {
  const std::uint64_t t = iteration_;
  const int stage = cfg_.stage_of(t);
  if (stage == 2 && cfg_.filter_mode != FilterMode::kNone) {
    const std::uint64_t offset = t - cfg_.stage2_begin();
    if (offset % cfg_.cleaning_cycle == 0) clean(static_cast<int>(offset / cfg_.cleaning_cycle));
  }
  const auto mask = mask_.load();
  int extra = 0;
  if (stage == 2 && cfg_.enable_rotation && cfg_.rotation_on_dropped && !mask->empty()) {
    const auto dropped = std::count(mask->begin(), mask->end(), 0);
    extra = static_cast<int>(std::lround(static_cast<double>(cfg_.m) * dropped / mask->size()));
  }
  const BatchIndices idx = sampler_.next_batch(t, *mask, extra);
  if (idx.fell_back) std::cerr << "warning: iteration " << t << ": keep mask empty, sampling full pool\n";
  const StepBatch<float> batch = assemble(idx, stage);

  StepOptions opt;
  opt.stage = stage;
  opt.terms = cfg_.terms();
  opt.weights = cfg_.weights;
  opt.cm_u_kept_only = cfg_.cm_u_kept_only;
  opt.bn_include_rotations = cfg_.bn_include_rotations;
  opt.sharpen_targets = cfg_.sharpen_targets;
  opt.sharpen_temperature = cfg_.sharpen_temperature;
  opt.simple_negative_fallback = cfg_.simple_negative_fallback;

  model_.zero_grad();
  try {
    last_ = compute_step(model_, batch, opt, true);
  } catch (const TrainingError& e) {
    std::ostringstream msg;
    msg << e.what() << " at iteration " << t << "; labeled indices:";
    for (int i : idx.labeled) msg << ' ' << i;
    msg << "; unlabeled indices:";
    for (int i : idx.unlabeled) msg << ' ' << i;
    msg << "; rotation-only indices:";
    for (int i : idx.extra) msg << ' ' << i;
    throw TrainingError(msg.str());
  }
  const double lr = cosine_lr(cfg_.lr0, t, cfg_.total_iters());
  auto params = model_.params();
  sgd_step<float>(params, velocity_, lr, cfg_.momentum, cfg_.weight_decay);
  ++iteration_;
  if (iteration_ % cfg_.log_every == 0 || iteration_ == cfg_.total_iters()) log_step(last_, stage, lr);
  if (iteration_ % cfg_.checkpoint_every == 0 || iteration_ == cfg_.total_iters()) write_checkpoint();
  if (on_step) on_step(t, last_);
}

void Trainer::run(std::optional<std::uint64_t> until) {
  const std::uint64_t end = std::min(until.value_or(cfg_.total_iters()), cfg_.total_iters());
  while (iteration_ < end) step();
}

void Trainer::resume(const fs::path& checkpoint_dir) {
  if (!fs::exists(checkpoint_dir / "state.json") || !fs::exists(checkpoint_dir / "optim.bin"))
    throw InputError("checkpoint " + checkpoint_dir.string() + " has no resume state");
  const auto meta = load_checkpoint_params(checkpoint_dir, model_);
  if (meta.seed != cfg_.seed)
    throw ConfigError("checkpoint seed " + std::to_string(meta.seed) + " differs from config seed " +
                      std::to_string(cfg_.seed));
  velocity_.clear();
  for (auto& [name, t] : load_tensors(checkpoint_dir / "optim.bin")) velocity_.push_back(std::move(t));
  if (velocity_.size() != model_.params().size()) throw InputError("optimizer state does not match model");
  const json state = read_json(checkpoint_dir / "state.json");
  iteration_ = state.at("iteration");
  filter_.reset();
  mask_.publish(KeepMask(data_.unlabeled.size(), 1));
  if (!state.at("filter").is_null()) {
    filter_ = filter_state_from_json(state["filter"]);
    if (filter_->keep_mask.size() != data_.unlabeled.size())
      throw InputError("checkpoint filter state does not match the unlabeled pool");
    mask_.publish(filter_->keep_mask);
  }
  reports_.clear();
  for (const auto& r : state.at("cleaning_reports")) reports_.push_back(report_from_json(r));
  if (run_dir_.empty()) return;
  // Drop log records written after the checkpoint.
  const fs::path log = run_dir_ / "metrics.jsonl";
  std::vector<std::string> keep;
  if (std::ifstream in(log); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const std::uint64_t it = j.at("iter");
      const bool cleaning = j.value("event", "") == "cleaning";
      if (cleaning ? it < iteration_ : it <= iteration_) keep.push_back(line);
    }
  }
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

MetricReport evaluate_run(const fs::path& run_dir, const TrainConfig& cfg, const OpenSetDataset& data,
                          int last) {
  const auto ckpts = list_checkpoints(run_dir);
  if (ckpts.empty()) throw InputError("no checkpoints under " + (run_dir / "checkpoints").string());
  MetricReport r;
  r.accuracy_mean = evaluate_with_checkpoint_averaging(ckpts, cfg, data.test, data.test_labels, last).mean;
  r.accuracies = {r.accuracy_mean};
  const auto model = load_checkpoint_model(ckpts.back(), cfg);
  if (!data.test.empty() && !data.ood_test.empty()) {
    r.auroc_mean = evaluate_auroc(model, data.test, data.ood_test);
    r.aurocs = {r.auroc_mean};
  }
  if (fs::exists(ckpts.back() / "state.json")) {
    const json state = read_json(ckpts.back() / "state.json");
    for (const auto& c : state.at("cleaning_reports")) r.cleaning.push_back(report_from_json(c));
    if (!r.cleaning.empty()) r.histograms = r.cleaning.back().histograms;
  }
  return r;
}

}  // namespace cmssl
