#include "cmssl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cmssl {

namespace {

double safe_log(double x) { return std::log(std::max(x, kScoreEps)); }

template <class T>
void prepare_grad(Tensor<T>* g, const Tensor<T>& like) {
  if (!g) return;
  if (!g->same_shape(like)) g->resize(like.n(), like.c(), like.h(), like.w());
  g->zero();
}

}  // namespace

double binary_entropy(double s) {
  double h = 0;
  if (s > 0) h -= s * safe_log(s);
  if (s < 1) h -= (1 - s) * safe_log(1 - s);
  return h;
}

template <class T>
double supervised_ce(const Tensor<T>& probs, std::span<const int> labels, Tensor<T>* dprobs) {
  const int n = probs.n(), k = static_cast<int>(probs.stride());
  if (n < 1) throw InputError("supervised_ce: empty batch");
  if (static_cast<int>(labels.size()) != n)
    throw InputError("supervised_ce: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  prepare_grad(dprobs, probs);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) throw InputError("supervised_ce: label out of range");
    const double p = probs.at(i, y);
    sum -= safe_log(p);
    if (dprobs && p > kScoreEps) dprobs->at(i, y) = static_cast<T>(-1.0 / (n * p));
  }
  return sum / n;
}

template <class T>
double consistency_kl(const Tensor<T>& probs_weak, const Tensor<T>& probs_strong,
                      Tensor<T>* dstrong) {
  if (!probs_weak.same_shape(probs_strong))
    throw InputError("consistency_kl: weak " + shape_string(probs_weak.shape()) + " vs strong " +
                     shape_string(probs_strong.shape()));
  const int n = probs_weak.n(), k = static_cast<int>(probs_weak.stride());
  if (n < 1) throw InputError("consistency_kl: empty batch");
  prepare_grad(dstrong, probs_strong);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const double p = probs_weak.at(i, j);
      const double q = probs_strong.at(i, j);
      if (p <= 0) continue;
      sum += p * (safe_log(p) - safe_log(q));
      if (dstrong && q > kScoreEps) dstrong->at(i, j) = static_cast<T>(-p / (n * q));
    }
  }
  return sum / n;
}

template <class T>
double rotation_ce(const Tensor<T>& rot_probs, std::span<const int> true_rotations,
                   Tensor<T>* dprobs) {
  const int rows = rot_probs.n();
  if (rot_probs.stride() != 4) throw InputError("rotation_ce: rotation head must be 4-way");
  if (rows == 0 || rows % 4 != 0 || static_cast<int>(true_rotations.size()) != rows)
    throw InputError("rotation_ce: expected groups of exactly 4 rotated views, got " +
                     std::to_string(rows) + " rows / " + std::to_string(true_rotations.size()) +
                     " labels");
  for (int r = 0; r < rows; ++r)
    if (true_rotations[r] != r % 4)
      throw InputError("rotation_ce: view " + std::to_string(r % 4) +
                       " of each group must carry rotation label " + std::to_string(r % 4));
  prepare_grad(dprobs, rot_probs);
  double sum = 0;
  for (int r = 0; r < rows; ++r) {
    const double q = rot_probs.at(r, r % 4);
    sum -= safe_log(q);
    if (dprobs && q > kScoreEps) dprobs->at(r, r % 4) = static_cast<T>(-1.0 / (rows * q));
  }
  return sum / rows;
}

template <class T>
int mine_hardest_negative(std::span<const T> probs, int true_label) {
  const int k = static_cast<int>(probs.size());
  if (k < 2) throw ConfigError("mine_hardest_negative: needs K >= 2");
  int best = -1;
  for (int y = 0; y < k; ++y) {
    if (y == true_label) continue;
    if (best < 0 || probs[y] > probs[best]) best = y;
  }
  return best;
}

int sample_simple_negative(int true_label, int hardest, int num_classes, Rng& rng,
                           bool allow_fallback) {
  if (num_classes < 3) {
    if (allow_fallback) return hardest;
    throw ConfigError("sample_simple_negative: needs K >= 3");
  }
  const int lo = std::min(true_label, hardest), hi = std::max(true_label, hardest);
  int v = uniform_int(rng, 0, num_classes - 3);
  if (v >= lo) ++v;
  if (v >= hi) ++v;
  return v;
}

int sample_other_label(int pseudo_label, int num_classes, Rng& rng) {
  if (num_classes < 2) throw ConfigError("sample_other_label: needs K >= 2");
  int v = uniform_int(rng, 0, num_classes - 2);
  if (v >= pseudo_label) ++v;
  return v;
}

template <class T>
double matching_loss_labeled(std::span<const T> pos, std::span<const T> hard,
                             std::span<const T> simple, std::span<T> dpos, std::span<T> dhard,
                             std::span<T> dsimple) {
  const std::size_t n = pos.size();
  if (hard.size() != n || simple.size() != n)
    throw InputError("matching_loss_labeled: score lists differ in length");
  if (n == 0) throw InputError("matching_loss_labeled: empty batch");
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double sp = pos[i], sh = hard[i], ss = simple[i];
    sum -= safe_log(sp) + safe_log(1 - sh) + safe_log(1 - ss);
    if (!dpos.empty()) dpos[i] = static_cast<T>(sp > kScoreEps ? -1.0 / (n * sp) : 0.0);
    if (!dhard.empty()) dhard[i] = static_cast<T>(1 - sh > kScoreEps ? 1.0 / (n * (1 - sh)) : 0.0);
    if (!dsimple.empty())
      dsimple[i] = static_cast<T>(1 - ss > kScoreEps ? 1.0 / (n * (1 - ss)) : 0.0);
  }
  return sum / static_cast<double>(n);
}

template <class T>
double matching_entropy_unlabeled(std::span<const T> pseudo, std::span<const T> neg,
                                  std::span<T> dpseudo, std::span<T> dneg) {
  const std::size_t m = pseudo.size();
  if (neg.size() != m) throw InputError("matching_entropy_unlabeled: score lists differ in length");
  if (m == 0) throw InputError("matching_entropy_unlabeled: empty batch");
  auto slope = [m](double s) {
    const double c = std::clamp(s, kScoreEps, 1 - kScoreEps);
    return std::log((1 - c) / c) / static_cast<double>(m);
  };
  double sum = 0;
  for (std::size_t i = 0; i < m; ++i) {
    sum += binary_entropy(pseudo[i]) + binary_entropy(neg[i]);
    if (!dpseudo.empty()) dpseudo[i] = static_cast<T>(slope(pseudo[i]));
    if (!dneg.empty()) dneg[i] = static_cast<T>(slope(neg[i]));
  }
  return sum / static_cast<double>(m);
}

LossBreakdown compose(int stage, const LossComponents& c, const LossTerms& enabled,
                      const LossWeights& w) {
  if (stage != 1 && stage != 2) throw ConfigError("compose: stage must be 1 or 2");
  LossBreakdown out;
  auto take = [&](const char* name, const std::optional<double>& v, bool in_stage, bool on,
                  double weight, double& slot) {
    if (!in_stage || !on) {
      if (v) throw ConfigError(std::string("compose: ") + name + " is not part of stage " +
                               std::to_string(stage));
      return;
    }
    if (!v) throw ConfigError(std::string("compose: stage ") + std::to_string(stage) +
                              " requires " + name);
    slot = *v;
    out.total += weight * *v;
  };
  take("ce", c.ce, true, enabled.ce, w.ce, out.ce);
  take("cm_l", c.cm_l, true, enabled.cm_l, w.cm_l, out.cm_l);
  take("rot", c.rot, true, enabled.rot, w.rot, out.rot);
  take("cc", c.cc, stage == 2, enabled.cc, w.cc, out.cc);
  take("cm_u", c.cm_u, stage == 2, enabled.cm_u, w.cm_u, out.cm_u);
  return out;
}

#define CMSSL_INSTANTIATE(T)                                                                    \
  template double supervised_ce<T>(const Tensor<T>&, std::span<const int>, Tensor<T>*);        \
  template double consistency_kl<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);           \
  template double rotation_ce<T>(const Tensor<T>&, std::span<const int>, Tensor<T>*);          \
  template int mine_hardest_negative<T>(std::span<const T>, int);                              \
  template double matching_loss_labeled<T>(std::span<const T>, std::span<const T>,             \
                                           std::span<const T>, std::span<T>, std::span<T>,     \
                                           std::span<T>);                                      \
  template double matching_entropy_unlabeled<T>(std::span<const T>, std::span<const T>,        \
                                                std::span<T>, std::span<T>);

CMSSL_INSTANTIATE(float)
CMSSL_INSTANTIATE(double)
#undef CMSSL_INSTANTIATE

}  // namespace cmssl
