#pragma once

// The seven training objectives as pure functions of head outputs.
//
// Every loss returns its value in double precision and, when a gradient
// tensor/span is supplied, writes d loss / d input (probabilities or
// scores). Logarithms use ln(max(x, kScoreEps)) and 0 * ln 0 = 0.

#include <optional>
#include <span>

#include "cmssl/model.hpp"
#include "cmssl/rng.hpp"
#include "cmssl/tensor.hpp"

namespace cmssl {

/// -(1/n) sum_i ln p_i[y_i].
template <class T>
double supervised_ce(const Tensor<T>& probs, std::span<const int> labels,
                     Tensor<T>* dprobs = nullptr);

/// (1/N) sum_i KL(weak_i || strong_i). The weak predictions are constant
/// targets: only d/d strong is produced.
template <class T>
double consistency_kl(const Tensor<T>& probs_weak, const Tensor<T>& probs_strong,
                      Tensor<T>* dstrong = nullptr);

/// -(1/4G) sum_g sum_j ln q_{g,j}[j], rows grouped four per source image with
/// row 4g+j carrying rotation label j.
template <class T>
double rotation_ce(const Tensor<T>& rot_probs, std::span<const int> true_rotations,
                   Tensor<T>* dprobs = nullptr);

/// argmax over y != true_label; lowest index on ties.
template <class T>
int mine_hardest_negative(std::span<const T> probs, int true_label);

/// Uniform over {0..K-1} \ {true_label, hardest}. For K < 3 there is no such
/// label: throws ConfigError unless allow_fallback, which returns hardest.
int sample_simple_negative(int true_label, int hardest, int num_classes, Rng& rng,
                           bool allow_fallback = false);

/// Uniform over {0..K-1} \ {pseudo_label}; the unlabeled negative of the entropy term.
int sample_other_label(int pseudo_label, int num_classes, Rng& rng);

/// -(1/n) sum [ln s_pos + ln(1-s_hard) + ln(1-s_simple)].
template <class T>
double matching_loss_labeled(std::span<const T> pos, std::span<const T> hard,
                             std::span<const T> simple, std::span<T> dpos = {},
                             std::span<T> dhard = {}, std::span<T> dsimple = {});

/// (1/m) sum [H(s_pseudo) + H(s_neg)] with H the binary entropy.
template <class T>
double matching_entropy_unlabeled(std::span<const T> pseudo, std::span<const T> neg,
                                  std::span<T> dpseudo = {}, std::span<T> dneg = {});

double binary_entropy(double s);

struct LossBreakdown {
  double ce = 0, cc = 0, rot = 0, cm_l = 0, cm_u = 0;
  double total = 0;
};

struct LossTerms {
  bool ce = true, cc = true, rot = true, cm_l = true, cm_u = true;
};

struct LossWeights {
  double ce = 1, cc = 1, rot = 1, cm_l = 1, cm_u = 1;
};

struct LossComponents {
  std::optional<double> ce, cc, rot, cm_l, cm_u;
};

/// Stage 1 sums ce + cm_l + rot, stage 2 adds cc + cm_u; terms switched off
/// in `enabled` are neither required nor counted. A required component that
/// is missing, or a component supplied outside its stage, is a ConfigError.
LossBreakdown compose(int stage, const LossComponents& c, const LossTerms& enabled = {},
                      const LossWeights& weights = {});

}  // namespace cmssl
