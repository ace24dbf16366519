#include "cmssl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cmssl/kernels.hpp"

namespace cmssl {

namespace k = kernels;

std::string shape_string(const std::array<int, 4>& s) {
  return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) +
         "," + std::to_string(s[3]) + ")";
}

// ---------------------------------------------------------------- Conv2d

template <class T>
Conv2d<T>::Conv2d(std::string name, int cin, int cout, int kernel, int stride, Rng& rng)
    : weight(std::move(name), cout, cin, kernel, kernel),
      cin_(cin), cout_(cout), k_(kernel), stride_(stride), pad_(kernel / 2) {
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / (cout * kernel * kernel)));
  for (auto& w : weight.value.vec()) w = static_cast<T>(d(rng));
}

template <class T>
void Conv2d<T>::forward(const Tensor<T>& x, Tensor<T>& y) const {
  const k::ConvGeom g{x.n(), cin_, x.h(), x.w(), cout_, k_, stride_, pad_};
  if (x.c() != cin_) throw ConfigError("conv " + weight.name + ": expected " +
                                       std::to_string(cin_) + " channels, got " +
                                       shape_string(x.shape()));
  if (y.shape() != std::array<int, 4>{g.n, cout_, g.out_h(), g.out_w()})
    y.resize(g.n, cout_, g.out_h(), g.out_w());
  k::conv2d_forward<T>(g, x.span(), weight.value.span(), y.span());
}

template <class T>
void Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) {
  const k::ConvGeom g{x.n(), cin_, x.h(), x.w(), cout_, k_, stride_, pad_};
  std::span<T> dxs;
  if (dx) {
    if (!dx->same_shape(x)) dx->resize(x.n(), x.c(), x.h(), x.w());
    dxs = dx->span();
  }
  k::conv2d_backward<T>(g, x.span(), weight.value.span(), dy.span(), dxs, weight.grad.span());
}

// ---------------------------------------------------------------- BatchNorm2d

template <class T>
BatchNorm2d<T>::BatchNorm2d(std::string name, int channels, T momentum, T eps)
    : gamma(name + ".gamma", channels, 1, 1, 1, false),
      beta(name + ".beta", channels, 1, 1, 1, false),
      running_mean(channels, 1),
      running_var(channels, 1, 1, 1, T(1)),
      momentum_(momentum),
      eps_(eps) {
  std::fill(gamma.value.vec().begin(), gamma.value.vec().end(), T(1));
}

template <class T>
void BatchNorm2d<T>::forward_train(const Tensor<T>& x, Tensor<T>& y, Cache& cache) {
  const int c = x.c(), hw = x.h() * x.w();
  if (!y.same_shape(x)) y.resize(x.n(), x.c(), x.h(), x.w());
  cache.mean.assign(c, T(0));
  cache.invstd.assign(c, T(0));
  k::batchnorm_forward_train<T>(x.n(), c, hw, x.span(), gamma.value.span(), beta.value.span(),
                                eps_, y.span(), cache.mean, cache.invstd);
  const double count = static_cast<double>(x.n()) * hw;
  const double unbias = count > 1 ? count / (count - 1) : 1.0;
  for (int ch = 0; ch < c; ++ch) {
    const double is = cache.invstd[ch];
    const double var = 1.0 / (is * is) - eps_;
    running_mean[ch] = static_cast<T>((1 - momentum_) * running_mean[ch] + momentum_ * cache.mean[ch]);
    running_var[ch] = static_cast<T>((1 - momentum_) * running_var[ch] + momentum_ * var * unbias);
  }
}

template <class T>
void BatchNorm2d<T>::forward_infer(const Tensor<T>& x, Tensor<T>& y) const {
  if (!y.same_shape(x)) y.resize(x.n(), x.c(), x.h(), x.w());
  k::batchnorm_forward_infer<T>(x.n(), x.c(), x.h() * x.w(), x.span(), gamma.value.span(),
                                beta.value.span(), running_mean.span(), running_var.span(), eps_,
                                y.span());
}

template <class T>
void BatchNorm2d<T>::backward(const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy,
                              Tensor<T>& dx) {
  if (!dx.same_shape(x)) dx.resize(x.n(), x.c(), x.h(), x.w());
  k::batchnorm_backward<T>(x.n(), x.c(), x.h() * x.w(), x.span(), gamma.value.span(), cache.mean,
                           cache.invstd, dy.span(), dx.span(), gamma.grad.span(),
                           beta.grad.span());
}

// ---------------------------------------------------------------- Linear

template <class T>
Linear<T>::Linear(std::string name, int in, int out, bool bias, Rng& rng)
    : weight(name + ".weight", out, in),
      bias(name + ".bias", bias ? out : 0, 1, 1, 1, false),
      in_(in), out_(out), has_bias_(bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& w : weight.value.vec()) w = static_cast<T>(d(rng));
  for (auto& b : this->bias.value.vec()) b = static_cast<T>(d(rng));
}

template <class T>
void Linear<T>::forward(const Tensor<T>& x, Tensor<T>& y) const {
  if (static_cast<int>(x.stride()) != in_)
    throw ConfigError(weight.name + ": expected rows of length " + std::to_string(in_) +
                      ", got " + shape_string(x.shape()));
  if (y.shape() != std::array<int, 4>{x.n(), out_, 1, 1}) y.resize(x.n(), out_);
  k::linear_forward<T>(x.n(), in_, out_, x.span(), weight.value.span(), bias.value.span(),
                       y.span());
}

template <class T>
void Linear<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) {
  std::span<T> dxs;
  if (dx) {
    if (dx->shape() != x.shape()) dx->resize(x.n(), x.c(), x.h(), x.w());
    dxs = dx->span();
  }
  k::linear_backward<T>(x.n(), in_, out_, x.span(), weight.value.span(), dy.span(), dxs,
                        weight.grad.span(), bias.grad.span());
}

// ---------------------------------------------------------------- ConvBn / blocks

template <class T>
void ConvBn<T>::forward_train(const Tensor<T>& x, Tensor<T>& y, Tape& tape) {
  conv.forward(x, tape.conv_out);
  bn.forward_train(tape.conv_out, y, tape.bn);
}

template <class T>
void ConvBn<T>::forward_infer(const Tensor<T>& x, Tensor<T>& y) const {
  Tensor<T> tmp;
  conv.forward(x, tmp);
  bn.forward_infer(tmp, y);
}

template <class T>
void ConvBn<T>::backward(const Tensor<T>& x, const Tape& tape, const Tensor<T>& dy,
                         Tensor<T>* dx) {
  Tensor<T> dconv;
  bn.backward(tape.conv_out, tape.bn, dy, dconv);
  conv.backward(x, dconv, dx);
}

namespace {

template <class T>
void relu_inplace(Tensor<T>& t) {
  k::relu_forward<T>(t.span(), t.span());
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  T* p = a.data();
  const T* q = b.data();
  const std::size_t n = a.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) p[i] += q[i];
}

}  // namespace

// ---------------------------------------------------------------- Backbone

BackboneConfig BackboneConfig::preset(const std::string& id, int in_channels, int image_size,
                                      int feature_dim) {
  BackboneConfig c;
  c.id = id;
  c.in_channels = in_channels;
  c.image_size = image_size;
  c.feature_dim = feature_dim;
  if (id == "small-resnet") {
    c.stem_width = 8;
    c.stem_stride = 2;
    c.stage_widths = {16, 32};
    c.stage_strides = {2, 2};
    c.blocks_per_stage = 1;
  } else if (id == "wrn-28-2") {
    c.stem_width = 16;
    c.stem_stride = 1;
    c.stage_widths = {32, 64, 128};
    c.stage_strides = {1, 2, 2};
    c.blocks_per_stage = 4;
  } else if (id == "tiny") {
    c.stem_width = 2;
    c.stem_stride = 1;
    c.stage_widths = {3};
    c.stage_strides = {2};
    c.blocks_per_stage = 1;
  } else {
    throw ConfigError("unknown backbone '" + id + "' (expected small-resnet, wrn-28-2, tiny)");
  }
  return c;
}

template <class T>
Backbone<T>::Backbone(const BackboneConfig& cfg, T bn_momentum, T bn_eps, Rng& rng) : cfg_(cfg) {
  if (cfg.stage_widths.size() != cfg.stage_strides.size() || cfg.stage_widths.empty())
    throw ConfigError("backbone stage_widths and stage_strides must be non-empty and equal length");
  if (cfg.feature_dim <= 0) throw ConfigError("feature_dim must be positive");
  stem_.conv = Conv2d<T>("stem.conv", cfg.in_channels, cfg.stem_width, 3, cfg.stem_stride, rng);
  stem_.bn = BatchNorm2d<T>("stem.bn", cfg.stem_width, bn_momentum, bn_eps);
  int width = cfg.stem_width;
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const int stride = b == 0 ? cfg.stage_strides[s] : 1;
      const int out = cfg.stage_widths[s];
      const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      ResidualBlock<T> blk;
      blk.a.conv = Conv2d<T>(p + ".a.conv", width, out, 3, stride, rng);
      blk.a.bn = BatchNorm2d<T>(p + ".a.bn", out, bn_momentum, bn_eps);
      blk.b.conv = Conv2d<T>(p + ".b.conv", out, out, 3, 1, rng);
      blk.b.bn = BatchNorm2d<T>(p + ".b.bn", out, bn_momentum, bn_eps);
      if (stride != 1 || width != out) {
        ConvBn<T> sc;
        sc.conv = Conv2d<T>(p + ".shortcut.conv", width, out, 1, stride, rng);
        sc.bn = BatchNorm2d<T>(p + ".shortcut.bn", out, bn_momentum, bn_eps);
        blk.shortcut = std::move(sc);
      }
      blocks_.push_back(std::move(blk));
      width = out;
    }
  }
  fc_ = Linear<T>("backbone.fc", width, cfg.feature_dim, true, rng);
}

template <class T>
void Backbone<T>::check_input(const Tensor<T>& images) const {
  if (images.n() < 1) throw InputError("extract_features: empty batch");
  if (images.c() != cfg_.in_channels || images.h() != cfg_.image_size ||
      images.w() != cfg_.image_size)
    throw ConfigError("backbone expects images (N," + std::to_string(cfg_.in_channels) + "," +
                      std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                      "), got " + shape_string(images.shape()));
}

template <class T>
void Backbone<T>::forward_train(const Tensor<T>& images, Tape& tape, Tensor<T>& features) {
  check_input(images);
  tape.input = images;
  stem_.forward_train(tape.input, tape.stem_out, tape.stem);
  relu_inplace(tape.stem_out);
  tape.blocks.resize(blocks_.size());
  const Tensor<T>* x = &tape.stem_out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& blk = blocks_[i];
    auto& t = tape.blocks[i];
    blk.a.forward_train(*x, t.h1, t.a);
    relu_inplace(t.h1);
    blk.b.forward_train(t.h1, t.h2, t.b);
    t.out = t.h2;
    if (blk.shortcut) {
      blk.shortcut->forward_train(*x, t.s_out, t.s);
      add_inplace(t.out, t.s_out);
    } else {
      add_inplace(t.out, *x);
    }
    relu_inplace(t.out);
    x = &t.out;
  }
  tape.pooled.resize(x->n(), x->c());
  k::global_avg_pool_forward<T>(x->n(), x->c(), x->h() * x->w(), x->span(), tape.pooled.span());
  fc_.forward(tape.pooled, features);
}

template <class T>
Tensor<T> Backbone<T>::forward_infer(const Tensor<T>& images) const {
  check_input(images);
  Tensor<T> cur;
  stem_.forward_infer(images, cur);
  relu_inplace(cur);
  for (const auto& blk : blocks_) {
    Tensor<T> h1, out;
    blk.a.forward_infer(cur, h1);
    relu_inplace(h1);
    blk.b.forward_infer(h1, out);
    if (blk.shortcut) {
      Tensor<T> s;
      blk.shortcut->forward_infer(cur, s);
      add_inplace(out, s);
    } else {
      add_inplace(out, cur);
    }
    relu_inplace(out);
    cur = std::move(out);
  }
  Tensor<T> pooled(cur.n(), cur.c());
  k::global_avg_pool_forward<T>(cur.n(), cur.c(), cur.h() * cur.w(), cur.span(), pooled.span());
  Tensor<T> features;
  fc_.forward(pooled, features);
  return features;
}

template <class T>
void Backbone<T>::backward(const Tape& tape, const Tensor<T>& dfeatures) {
  Tensor<T> dpooled;
  fc_.backward(tape.pooled, dfeatures, &dpooled);
  const Tensor<T>& last = tape.blocks.empty() ? tape.stem_out : tape.blocks.back().out;
  Tensor<T> dcur(last.n(), last.c(), last.h(), last.w());
  k::global_avg_pool_backward<T>(last.n(), last.c(), last.h() * last.w(), dpooled.span(),
                                 dcur.span());
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    auto& blk = blocks_[i];
    const auto& t = tape.blocks[i];
    const Tensor<T>& x = i == 0 ? tape.stem_out : tape.blocks[i - 1].out;
    Tensor<T> dsum(dcur.n(), dcur.c(), dcur.h(), dcur.w());
    k::relu_backward<T>(t.out.span(), dcur.span(), dsum.span());
    Tensor<T> dh1;
    blk.b.backward(t.h1, t.b, dsum, &dh1);
    k::relu_backward<T>(t.h1.span(), dh1.span(), dh1.span());
    Tensor<T> dx;
    blk.a.backward(x, t.a, dh1, &dx);
    if (blk.shortcut) {
      Tensor<T> dxs;
      blk.shortcut->backward(x, t.s, dsum, &dxs);
      add_inplace(dx, dxs);
    } else {
      add_inplace(dx, dsum);
    }
    dcur = std::move(dx);
  }
  k::relu_backward<T>(tape.stem_out.span(), dcur.span(), dcur.span());
  stem_.backward(tape.input, tape.stem, dcur, nullptr);
}

template <class T>
std::vector<Param<T>*> Backbone<T>::params() {
  std::vector<Param<T>*> out;
  auto add = [&](ConvBn<T>& cb) {
    out.push_back(&cb.conv.weight);
    out.push_back(&cb.bn.gamma);
    out.push_back(&cb.bn.beta);
  };
  add(stem_);
  for (auto& b : blocks_) {
    add(b.a);
    add(b.b);
    if (b.shortcut) add(*b.shortcut);
  }
  out.push_back(&fc_.weight);
  out.push_back(&fc_.bias);
  return out;
}

template <class T>
std::vector<const Param<T>*> Backbone<T>::params() const {
  auto mut = const_cast<Backbone<T>*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> Backbone<T>::buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  auto add = [&](ConvBn<T>& cb) {
    const std::string base = cb.bn.gamma.name.substr(0, cb.bn.gamma.name.size() - 6);
    out.emplace_back(base + ".running_mean", &cb.bn.running_mean);
    out.emplace_back(base + ".running_var", &cb.bn.running_var);
  };
  add(stem_);
  for (auto& b : blocks_) {
    add(b.a);
    add(b.b);
    if (b.shortcut) add(*b.shortcut);
  }
  return out;
}

template <class T>
std::vector<std::pair<std::string, const Tensor<T>*>> Backbone<T>::buffers() const {
  auto mut = const_cast<Backbone<T>*>(this)->buffers();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [n, p] : mut) out.emplace_back(n, p);
  return out;
}

// ---------------------------------------------------------------- MatchingHead

template <class T>
MatchingHead<T>::MatchingHead(int feature_dim, int num_classes, bool embed_bias, Rng& rng)
    : embed("match.embed", num_classes, feature_dim, embed_bias, rng),
      hidden("match.hidden", 2 * feature_dim, feature_dim, true, rng),
      out("match.out", feature_dim, 1, true, rng),
      feature_dim_(feature_dim),
      num_classes_(num_classes) {}

template <class T>
void MatchingHead<T>::forward(const Tensor<T>& features, std::span<const int> labels,
                              Tape& tape) const {
  const int n = features.n(), d = feature_dim_;
  if (static_cast<int>(labels.size()) != n)
    throw InputError("match_score: one label per feature row required");
  if (static_cast<int>(features.stride()) != d)
    throw ConfigError("match_score: feature length must equal D=" + std::to_string(d));
  tape.labels.assign(labels.begin(), labels.end());
  tape.joint.resize(n, 2 * d);
  const auto& ew = embed.weight.value;  // (D, K)
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes_)
      throw InputError("match_score: label " + std::to_string(y) + " outside [0," +
                       std::to_string(num_classes_) + ")");
    T* row = tape.joint.data() + static_cast<std::size_t>(i) * 2 * d;
    std::copy_n(features.data() + static_cast<std::size_t>(i) * d, d, row);
    for (int j = 0; j < d; ++j)
      row[d + j] = ew[static_cast<std::size_t>(j) * num_classes_ + y] +
                   (embed.has_bias() ? embed.bias.value[j] : T(0));
  }
  hidden.forward(tape.joint, tape.hidden);
  relu_inplace(tape.hidden);
  out.forward(tape.hidden, tape.logits);
  tape.scores.resize(n);
  for (int i = 0; i < n; ++i) {
    const double z = tape.logits[i];
    const double s = 1.0 / (1.0 + std::exp(-z));
    tape.scores[i] = static_cast<T>(std::clamp(s, kScoreEps, 1.0 - kScoreEps));
  }
}

template <class T>
Tensor<T> MatchingHead<T>::backward(const Tape& tape, std::span<const T> dscores) {
  const int n = static_cast<int>(tape.scores.size()), d = feature_dim_;
  Tensor<T> dlogits(n, 1);
  for (int i = 0; i < n; ++i) {
    const double z = tape.logits[i];
    const double s = 1.0 / (1.0 + std::exp(-z));
    // Zero slope where the clamp is active.
    if (s <= kScoreEps || s >= 1.0 - kScoreEps) continue;
    dlogits[i] = static_cast<T>(dscores[i] * s * (1.0 - s));
  }
  Tensor<T> dhidden;
  out.backward(tape.hidden, dlogits, &dhidden);
  k::relu_backward<T>(tape.hidden.span(), dhidden.span(), dhidden.span());
  Tensor<T> djoint;
  hidden.backward(tape.joint, dhidden, &djoint);
  Tensor<T> dfeatures(n, d);
  auto& ewg = embed.weight.grad;
  for (int i = 0; i < n; ++i) {
    const T* row = djoint.data() + static_cast<std::size_t>(i) * 2 * d;
    std::copy_n(row, d, dfeatures.data() + static_cast<std::size_t>(i) * d);
    const int y = tape.labels[i];
    for (int j = 0; j < d; ++j) {
      ewg[static_cast<std::size_t>(j) * num_classes_ + y] += row[d + j];
      if (embed.has_bias()) embed.bias.grad[j] += row[d + j];
    }
  }
  return dfeatures;
}

// ---------------------------------------------------------------- Model

template <class T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.num_classes < 1) throw ConfigError("model: number of classes K is not configured");
  Rng rng = make_rng(seed, Stream::kInit);
  backbone_ = Backbone<T>(cfg.backbone, static_cast<T>(cfg.bn_momentum),
                          static_cast<T>(cfg.bn_eps), rng);
  const int d = cfg.feature_dim();
  classifier_ = Linear<T>("classifier", d, cfg.num_classes, true, rng);
  rotation_ = Linear<T>("rotation", d, 4, true, rng);
  matcher_ = MatchingHead<T>(d, cfg.num_classes, cfg.label_embed_bias, rng);
}

template <class T>
Tensor<T> Model<T>::extract_features(const Tensor<T>& images) const {
  return backbone_.forward_infer(images);
}

template <class T>
Tensor<T> Model<T>::classify(const Tensor<T>& features) const {
  Tensor<T> logits;
  classifier_.forward(features, logits);
  return softmax_rows(logits);
}

template <class T>
Tensor<T> Model<T>::predict_rotation(const Tensor<T>& features) const {
  Tensor<T> logits;
  rotation_.forward(features, logits);
  return softmax_rows(logits);
}

template <class T>
T Model<T>::match_score(std::span<const T> feature, int label) const {
  Tensor<T> f(1, static_cast<int>(feature.size()));
  std::copy(feature.begin(), feature.end(), f.data());
  const int labels[1] = {label};
  return match_scores(f, labels)[0];
}

template <class T>
std::vector<T> Model<T>::match_scores(const Tensor<T>& features, std::span<const int> labels) const {
  typename MatchingHead<T>::Tape tape;
  matcher_.forward(features, labels, tape);
  return tape.scores;
}

template <class T>
std::vector<Param<T>*> Model<T>::params() {
  auto out = backbone_.params();
  for (auto* l : {&classifier_, &rotation_, &matcher_.embed, &matcher_.hidden, &matcher_.out}) {
    out.push_back(&l->weight);
    if (l->has_bias()) out.push_back(&l->bias);
  }
  return out;
}

template <class T>
std::vector<const Param<T>*> Model<T>::params() const {
  auto mut = const_cast<Model<T>*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::buffers() {
  return backbone_.buffers();
}

template <class T>
std::vector<std::pair<std::string, const Tensor<T>*>> Model<T>::buffers() const {
  return backbone_.buffers();
}

template <class T>
void Model<T>::zero_grad() {
  for (auto* p : params()) p->grad.zero();
}

template <class T>
std::uint64_t Model<T>::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const Tensor<T>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto* p : params()) feed(p->value);
  for (const auto& [name, b] : buffers()) feed(*b);
  return h;
}

// ---------------------------------------------------------------- helpers

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const int n = logits.n(), c = static_cast<int>(logits.stride());
  Tensor<T> p(n, c);
  for (int i = 0; i < n; ++i) {
    const T* z = logits.data() + static_cast<std::size_t>(i) * c;
    T* q = p.data() + static_cast<std::size_t>(i) * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0;
    for (int j = 0; j < c; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
    for (int j = 0; j < c; ++j) q[j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - mx) / s);
  }
  return p;
}

template <class T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  const int n = probs.n(), c = static_cast<int>(probs.stride());
  Tensor<T> dz(n, c);
  for (int i = 0; i < n; ++i) {
    const T* p = probs.data() + static_cast<std::size_t>(i) * c;
    const T* g = dprobs.data() + static_cast<std::size_t>(i) * c;
    double dot = 0;
    for (int j = 0; j < c; ++j) dot += static_cast<double>(p[j]) * g[j];
    T* o = dz.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) o[j] = static_cast<T>(p[j] * (g[j] - dot));
  }
  return dz;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& src, std::span<const int> rows) {
  const std::size_t s = src.stride();
  Tensor<T> out(static_cast<int>(rows.size()), src.c(), src.h(), src.w());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.data() + static_cast<std::size_t>(rows[i]) * s, s, out.data() + i * s);
  return out;
}

template <class T>
void scatter_add_rows(const Tensor<T>& src, std::span<const int> rows, Tensor<T>& dst) {
  const std::size_t s = dst.stride();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    T* d = dst.data() + static_cast<std::size_t>(rows[i]) * s;
    const T* q = src.data() + i * s;
    for (std::size_t j = 0; j < s; ++j) d[j] += q[j];
  }
}

#define CMSSL_INSTANTIATE(T)                                                          \
  template class Conv2d<T>;                                                           \
  template class BatchNorm2d<T>;                                                      \
  template class Linear<T>;                                                           \
  template struct ConvBn<T>;                                                          \
  template class Backbone<T>;                                                         \
  template class MatchingHead<T>;                                                     \
  template class Model<T>;                                                            \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                               \
  template Tensor<T> softmax_backward<T>(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const int>);          \
  template void scatter_add_rows<T>(const Tensor<T>&, std::span<const int>, Tensor<T>&);

CMSSL_INSTANTIATE(float)
CMSSL_INSTANTIATE(double)
#undef CMSSL_INSTANTIATE

}  // namespace cmssl
