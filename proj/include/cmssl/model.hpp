#pragma once

// Backbone and the three heads: K-way classifier, 4-way rotation classifier,
// and the cross-modal image/label matching head.
//
// Layers keep no hidden state between calls. Training-mode forwards write
// everything the backward pass needs into an explicit tape, so inference on
// a const Model is safe to run concurrently with nothing else mutating it.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmssl/rng.hpp"
#include "cmssl/tensor.hpp"

namespace cmssl {

/// Lower/upper clamp for matching scores and probabilities inside logarithms.
inline constexpr double kScoreEps = 1e-6;

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // weight decay applies; false for norm scales and biases

  Param() = default;
  Param(std::string n, int a, int b = 1, int c = 1, int d = 1, bool wd = true)
      : name(std::move(n)), value(a, b, c, d), grad(a, b, c, d), decay(wd) {}
  std::size_t size() const { return value.size(); }
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int cin, int cout, int k, int stride, Rng& rng);

  int cin() const { return cin_; }
  int cout() const { return cout_; }
  int stride() const { return stride_; }
  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  void forward(const Tensor<T>& x, Tensor<T>& y) const;
  /// dx may be null (network input).
  void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx);

  Param<T> weight;

 private:
  int cin_ = 0, cout_ = 0, k_ = 3, stride_ = 1, pad_ = 1;
};

template <class T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, T momentum, T eps);

  struct Cache {
    std::vector<T> mean, invstd;
  };
  void forward_train(const Tensor<T>& x, Tensor<T>& y, Cache& cache);
  void forward_infer(const Tensor<T>& x, Tensor<T>& y) const;
  void backward(const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy, Tensor<T>& dx);

  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;

 private:
  T momentum_ = T(0.1), eps_ = T(1e-5);
};

/// y = x W^T + b over rows of an (N, in) matrix.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, bool bias, Rng& rng);

  int in() const { return in_; }
  int out() const { return out_; }
  bool has_bias() const { return has_bias_; }

  void forward(const Tensor<T>& x, Tensor<T>& y) const;
  /// dx may be null.
  void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx);

  Param<T> weight, bias;

 private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = true;
};

struct BackboneConfig {
  std::string id = "small-resnet";
  int in_channels = 1;
  int image_size = 28;
  int stem_width = 8;
  int stem_stride = 2;
  std::vector<int> stage_widths{16, 32};
  std::vector<int> stage_strides{2, 2};
  int blocks_per_stage = 1;
  int feature_dim = 128;

  /// Named presets: "small-resnet" (desk scale), "wrn-28-2", "tiny" (gradient checks).
  static BackboneConfig preset(const std::string& id, int in_channels, int image_size,
                               int feature_dim);
};

struct ModelConfig {
  BackboneConfig backbone;
  int num_classes = 0;
  bool label_embed_bias = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  int feature_dim() const { return backbone.feature_dim; }
};

/// conv(no bias) + batch norm, the basic residual building unit.
template <class T>
struct ConvBn {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  struct Tape {
    Tensor<T> conv_out;
    typename BatchNorm2d<T>::Cache bn;
  };
  void forward_train(const Tensor<T>& x, Tensor<T>& y, Tape& tape);
  void forward_infer(const Tensor<T>& x, Tensor<T>& y) const;
  void backward(const Tensor<T>& x, const Tape& tape, const Tensor<T>& dy, Tensor<T>* dx);
};

template <class T>
struct ResidualBlock {
  ConvBn<T> a, b;
  std::optional<ConvBn<T>> shortcut;
  struct Tape {
    typename ConvBn<T>::Tape a, b, s;
    Tensor<T> h1;        // relu(bn_a(conv_a(x)))
    Tensor<T> h2;        // bn_b(conv_b(h1))
    Tensor<T> s_out;     // shortcut output when projected
    Tensor<T> out;       // relu(h2 + shortcut)
  };
};

template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, T bn_momentum, T bn_eps, Rng& rng);

  struct Tape {
    Tensor<T> input;
    typename ConvBn<T>::Tape stem;
    Tensor<T> stem_out;
    std::vector<typename ResidualBlock<T>::Tape> blocks;
    Tensor<T> pooled;
  };

  const BackboneConfig& config() const { return cfg_; }

  /// Batch-statistics forward; updates running stats and fills the tape.
  void forward_train(const Tensor<T>& images, Tape& tape, Tensor<T>& features);
  /// Running-statistics forward.
  Tensor<T> forward_infer(const Tensor<T>& images) const;
  void backward(const Tape& tape, const Tensor<T>& dfeatures);

  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;
  /// Running statistics, serialized with the parameters.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();
  std::vector<std::pair<std::string, const Tensor<T>*>> buffers() const;

 private:
  void check_input(const Tensor<T>& images) const;

  BackboneConfig cfg_;
  ConvBn<T> stem_;
  std::vector<ResidualBlock<T>> blocks_;
  Linear<T> fc_;
};

/// Cross-modal matching head: label -> one-hot -> linear embedding, then
/// [feature; embedding] -> hidden(D) -> ReLU -> linear(1) -> sigmoid -> clamp.
template <class T>
class MatchingHead {
 public:
  MatchingHead() = default;
  MatchingHead(int feature_dim, int num_classes, bool embed_bias, Rng& rng);

  struct Tape {
    std::vector<int> labels;
    Tensor<T> joint;     // (N, 2D)
    Tensor<T> hidden;    // relu output (N, D)
    Tensor<T> logits;    // (N, 1)
    std::vector<T> scores;
  };

  void forward(const Tensor<T>& features, std::span<const int> labels, Tape& tape) const;
  /// Returns d loss / d features for the rows passed to forward().
  Tensor<T> backward(const Tape& tape, std::span<const T> dscores);

  int num_classes() const { return num_classes_; }

  Linear<T> embed, hidden, out;

 private:
  int feature_dim_ = 0, num_classes_ = 0;
};

template <class T>
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  int num_classes() const { return cfg_.num_classes; }
  int feature_dim() const { return cfg_.feature_dim(); }

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  Linear<T>& classifier() { return classifier_; }
  const Linear<T>& classifier() const { return classifier_; }
  Linear<T>& rotation_head() { return rotation_; }
  const Linear<T>& rotation_head() const { return rotation_; }
  MatchingHead<T>& matcher() { return matcher_; }
  const MatchingHead<T>& matcher() const { return matcher_; }

  /// Inference-mode features, one row of length D per image.
  Tensor<T> extract_features(const Tensor<T>& images) const;
  /// K-way probabilities per feature row.
  Tensor<T> classify(const Tensor<T>& features) const;
  /// 4-way rotation probabilities per feature row.
  Tensor<T> predict_rotation(const Tensor<T>& features) const;
  T match_score(std::span<const T> feature, int label) const;
  std::vector<T> match_scores(const Tensor<T>& features, std::span<const int> labels) const;

  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();
  std::vector<std::pair<std::string, const Tensor<T>*>> buffers() const;
  void zero_grad();
  /// FNV-1a over every parameter and buffer byte.
  std::uint64_t checksum() const;

 private:
  ModelConfig cfg_;
  Backbone<T> backbone_;
  Linear<T> classifier_;
  Linear<T> rotation_;
  MatchingHead<T> matcher_;
};

/// Row-wise softmax of an (N, C) logit matrix.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

/// Gradient through softmax: dlogits = p * (dp - <dp, p>) per row.
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs);

/// Copies selected rows into a new contiguous tensor.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& src, std::span<const int> rows);

/// dst[rows[i]] += src[i].
template <class T>
void scatter_add_rows(const Tensor<T>& src, std::span<const int> rows, Tensor<T>& dst);

}  // namespace cmssl
