#pragma once

// Weak, strong and rotated views.
//
// Strong policy (RandAugment lineage): two distinct ops drawn uniformly from
// the 14-op pool below, each at a magnitude drawn uniformly from
// [0, max_magnitude], followed by one cutout square of side 1/4 of the image.

#include <array>
#include <string_view>
#include <vector>

#include "cmssl/image.hpp"
#include "cmssl/rng.hpp"

namespace cmssl {

enum class AugOp {
  kIdentity,
  kAutoContrast,
  kEqualize,
  kRotate,
  kSolarize,
  kColor,
  kPosterize,
  kContrast,
  kBrightness,
  kSharpness,
  kShearX,
  kShearY,
  kTranslateX,
  kTranslateY,
};

inline constexpr int kAugPoolSize = 14;
std::string_view aug_op_name(AugOp op);

struct AugmentConfig {
  double flip_probability = 0.5;
  int crop_padding = 4;
  int strong_ops = 2;
  double max_magnitude = 1.0;
  double cutout_fraction = 0.25;
  /// Rotated views come from the weak view; false rotates the raw image.
  bool rotate_weak_view = true;
};

/// Exact 90*k degree counter-clockwise rotation of a square image.
Image rotate(const Image& image, int k);

Image hflip(const Image& image);

/// Crop of the reflection-padded image at offset (dy, dx) in [0, 2*pad].
Image padded_crop(const Image& image, int pad, int dy, int dx);

Image weak_augment(const Image& image, Rng& rng, const AugmentConfig& cfg = {});

/// Applies a single pool op at magnitude in [0, 1]; `positive` picks the
/// direction of signed ops.
Image apply_op(const Image& image, AugOp op, double magnitude, bool positive);

Image cutout(const Image& image, int cy, int cx, int side, float fill = 0.5f);

/// `applied`, when given, receives the ops chosen for this draw.
Image strong_augment(const Image& image, Rng& rng, const AugmentConfig& cfg = {},
                     std::vector<AugOp>* applied = nullptr);

struct ViewSet {
  Image weak;
  Image strong;
  std::array<Image, 4> rotations;
};

/// All views of one sample; the stream is fixed by (seed, sample key, iteration).
ViewSet make_views(const Image& image, std::uint64_t seed, std::uint64_t sample_key,
                   std::uint64_t iteration, const AugmentConfig& cfg, bool want_strong = true,
                   bool want_rotations = true);

}  // namespace cmssl
