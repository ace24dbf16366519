#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance suite.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmssl/filter.hpp"
#include "cmssl/trainer.hpp"

namespace cmssl::oracle {

/// Fraction of (id, ood) pairs with id > ood, ties 1/2, by counting every pair.
double brute_auroc(std::span<const double> id, std::span<const double> ood);

/// Exhaustive Otsu over the candidate edges k/bins in exact integer arithmetic.
OtsuResult brute_otsu(std::span<const double> scores, int bins);

enum class Term { kCe, kCc, kRot, kCmL, kCmU };
std::string term_name(Term t);

struct GradCheckOptions {
  int rotations = 4;
  bool bn_include_rotations = true;
  int n = 2, m = 2;
  double step = 1e-4;
  std::uint64_t seed = 1;
};

struct GradCheck {
  double max_rel_err = 0;
  std::size_t checked = 0;
  double grad_norm = 0;
  /// Entries whose difference quotient at the nominal step straddles a kink
  /// (ReLU or clamp); these are compared at the first smaller step that is smooth.
  std::size_t kinked = 0;
  std::string worst;  // entry with the largest error, "name[i] analytic vs numeric"
};

/// Analytic gradients of one loss term against central differences on the
/// tiny double-precision model (D = 8, K = 4). Every parameter entry is
/// checked; an entry is smooth at step h when the central differences at h and
/// h/2 agree to 1e-4. The consistency term treats the weak view as a constant target,
/// so it is checked at the classifier head with the target frozen.
GradCheck check_term_gradient(Term term, const GradCheckOptions& opt = {});

/// rel(a, b) = |a - b| / max(|a|, |b|, floor).
double rel_err(double a, double b, double floor = 1e-5);

/// Random model inputs for a layout on the tiny model.
StepBatch<double> random_step_batch(const BatchLayout& layout, int num_classes, std::uint64_t seed);
ModelConfig tiny_model_config();

/// Open-set data of 8x8 noisy class patterns: ID classes {0, 1, 2}, OOD {3, 4},
/// 10 labels per class and an unlabeled pool of 480 ID plus 100 OOD images.
OpenSetDataset synthetic_openset(std::uint64_t seed = 0);
/// Desk-like schedule on the tiny backbone; 60 + 60 iterations, cycles of 20.
TrainConfig tiny_train_config();

}  // namespace cmssl::oracle
