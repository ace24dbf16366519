#include "cmssl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace cmssl {

template <class T>
Tensor<T> to_tensor(std::span<const Image* const> images) {
  if (images.empty()) return {};
  const Image& first = *images[0];
  Tensor<T> t(static_cast<int>(images.size()), first.channels, first.height, first.width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i]->same_shape(first))
      throw InputError("to_tensor: images must share one spatial shape");
    std::transform(images[i]->pixels.begin(), images[i]->pixels.end(),
                   t.data() + i * t.stride(), [](float v) { return static_cast<T>(v); });
  }
  return t;
}

template <class T>
Tensor<T> to_tensor(std::span<const Image> images) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& im : images) ptrs.push_back(&im);
  return to_tensor<T>(std::span<const Image* const>(ptrs));
}

template Tensor<float> to_tensor<float>(std::span<const Image* const>);
template Tensor<double> to_tensor<double>(std::span<const Image* const>);
template Tensor<float> to_tensor<float>(std::span<const Image>);
template Tensor<double> to_tensor<double>(std::span<const Image>);

std::string_view aug_op_name(AugOp op) {
  static constexpr std::array<std::string_view, kAugPoolSize> names{
      "identity", "autocontrast", "equalize", "rotate",   "solarize",  "color",  "posterize",
      "contrast", "brightness",   "sharpness", "shear_x", "shear_y", "translate_x", "translate_y"};
  return names[static_cast<int>(op)];
}

namespace {

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void clip(Image& im) {
  for (auto& v : im.pixels) v = clip01(v);
}

// numpy-style "reflect" (edge pixel not repeated).
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

double bilinear(const Image& im, int c, double y, double x, float fill) {
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  auto px = [&](int yy, int xx) -> double {
    if (yy < 0 || yy >= im.height || xx < 0 || xx >= im.width) return fill;
    return im.at(c, yy, xx);
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

// out(y, x) = in(A * (y - cy, x - cx) + (cy, cx) + shift)
Image affine(const Image& im, double a00, double a01, double a10, double a11, double ty,
             double tx) {
  Image out(im.channels, im.height, im.width);
  const double cy = (im.height - 1) / 2.0, cx = (im.width - 1) / 2.0;
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double sy = a00 * dy + a01 * dx + cy + ty;
        const double sx = a10 * dy + a11 * dx + cx + tx;
        out.at(c, y, x) = clip01(bilinear(im, c, sy, sx, 0.f));
      }
  return out;
}

Image blend(const Image& a, const Image& b, double factor) {
  // factor 0 -> b, 1 -> a
  Image out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    out.pixels[i] = clip01(b.pixels[i] + factor * (a.pixels[i] - b.pixels[i]));
  return out;
}

Image grayscale(const Image& im) {
  if (im.channels == 1) return im;
  Image g = im;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const double l = 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
      for (int c = 0; c < im.channels; ++c) g.at(c, y, x) = static_cast<float>(l);
    }
  return g;
}

Image equalize(const Image& im) {
  Image out = im;
  const std::size_t plane = static_cast<std::size_t>(im.height) * im.width;
  for (int c = 0; c < im.channels; ++c) {
    std::array<int, 256> hist{};
    const float* p = im.pixels.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) ++hist[static_cast<int>(std::lround(p[i] * 255.0))];
    std::array<double, 256> cdf{};
    int acc = 0;
    for (int v = 0; v < 256; ++v) cdf[v] = (acc += hist[v]);
    const double cmin = *std::find_if(cdf.begin(), cdf.end(), [](double v) { return v > 0; });
    const double denom = static_cast<double>(plane) - cmin;
    float* q = out.pixels.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const int v = static_cast<int>(std::lround(p[i] * 255.0));
      q[i] = denom > 0 ? clip01((cdf[v] - cmin) / denom) : p[i];
    }
  }
  return out;
}

Image smooth(const Image& im) {
  Image out = im;
  for (int c = 0; c < im.channels; ++c)
    for (int y = 1; y + 1 < im.height; ++y)
      for (int x = 1; x + 1 < im.width; ++x) {
        double s = 4 * im.at(c, y, x);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) s += im.at(c, y + dy, x + dx);
        out.at(c, y, x) = static_cast<float>(s / 13.0);
      }
  return out;
}

Image translate(const Image& im, int sy, int sx) {
  Image out(im.channels, im.height, im.width);
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) {
        const int yy = y - sy, xx = x - sx;
        if (yy >= 0 && yy < im.height && xx >= 0 && xx < im.width) out.at(c, y, x) = im.at(c, yy, xx);
      }
  return out;
}

}  // namespace

Image rotate(const Image& image, int k) {
  if (image.height != image.width) throw InputError("rotate: image must be square");
  k = ((k % 4) + 4) % 4;
  if (k == 0) return image;
  const int n = image.height;
  Image out(image.channels, n, n);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        int sy = y, sx = x;
        // counter-clockwise: out(y, x) = in(x, n-1-y) for one quarter turn
        switch (k) {
          case 1: sy = x; sx = n - 1 - y; break;
          case 2: sy = n - 1 - y; sx = n - 1 - x; break;
          case 3: sy = n - 1 - x; sx = y; break;
        }
        out.at(c, y, x) = image.at(c, sy, sx);
      }
  return out;
}

Image hflip(const Image& image) {
  Image out = image;
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

Image padded_crop(const Image& image, int pad, int dy, int dx) {
  Image out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        out.at(c, y, x) = image.at(c, reflect(y + dy - pad, image.height),
                                   reflect(x + dx - pad, image.width));
  return out;
}

Image weak_augment(const Image& image, Rng& rng, const AugmentConfig& cfg) {
  const bool flip = uniform01(rng) < cfg.flip_probability;
  const int dy = uniform_int(rng, 0, 2 * cfg.crop_padding);
  const int dx = uniform_int(rng, 0, 2 * cfg.crop_padding);
  Image out = flip ? hflip(image) : image;
  return cfg.crop_padding > 0 ? padded_crop(out, cfg.crop_padding, dy, dx) : out;
}

Image apply_op(const Image& image, AugOp op, double m, bool positive) {
  const double sgn = positive ? 1.0 : -1.0;
  const double factor = 1.0 + sgn * 0.9 * m;
  switch (op) {
    case AugOp::kIdentity:
      return image;
    case AugOp::kAutoContrast: {
      Image out = image;
      const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
      for (int c = 0; c < image.channels; ++c) {
        auto b = image.pixels.begin() + c * plane;
        const auto [lo, hi] = std::minmax_element(b, b + plane);
        if (*hi <= *lo) continue;
        for (std::size_t i = 0; i < plane; ++i)
          out.pixels[c * plane + i] = clip01((b[i] - *lo) / (*hi - *lo));
      }
      return out;
    }
    case AugOp::kEqualize:
      return equalize(image);
    case AugOp::kRotate: {
      const double a = sgn * m * 30.0 * std::numbers::pi / 180.0;
      return affine(image, std::cos(a), -std::sin(a), std::sin(a), std::cos(a), 0, 0);
    }
    case AugOp::kSolarize: {
      Image out = image;
      const double thr = 1.0 - m;
      for (auto& v : out.pixels)
        if (v > thr) v = 1.f - v;
      return out;
    }
    case AugOp::kColor:
      return blend(image, grayscale(image), factor);
    case AugOp::kPosterize: {
      Image out = image;
      const int bits = 8 - static_cast<int>(std::lround(4 * m));
      const int levels = 1 << bits;
      for (auto& v : out.pixels) {
        const int q = static_cast<int>(std::lround(v * 255.0)) >> (8 - bits);
        v = static_cast<float>(q) / static_cast<float>(levels - 1);
      }
      return out;
    }
    case AugOp::kContrast: {
      const double mean =
          std::accumulate(image.pixels.begin(), image.pixels.end(), 0.0) / image.size();
      Image gray(image.channels, image.height, image.width, static_cast<float>(mean));
      return blend(image, gray, factor);
    }
    case AugOp::kBrightness:
      return blend(image, Image(image.channels, image.height, image.width, 0.f), factor);
    case AugOp::kSharpness:
      return blend(image, smooth(image), factor);
    case AugOp::kShearX:
      return affine(image, 1, 0, sgn * 0.3 * m, 1, 0, 0);
    case AugOp::kShearY:
      return affine(image, 1, sgn * 0.3 * m, 0, 1, 0, 0);
    case AugOp::kTranslateX:
      return translate(image, 0, static_cast<int>(std::lround(sgn * 0.3 * m * image.width)));
    case AugOp::kTranslateY:
      return translate(image, static_cast<int>(std::lround(sgn * 0.3 * m * image.height)), 0);
  }
  return image;
}

Image cutout(const Image& image, int cy, int cx, int side, float fill) {
  Image out = image;
  const int y0 = std::max(0, cy - side / 2), x0 = std::max(0, cx - side / 2);
  const int y1 = std::min(image.height, cy - side / 2 + side);
  const int x1 = std::min(image.width, cx - side / 2 + side);
  for (int c = 0; c < image.channels; ++c)
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) out.at(c, y, x) = fill;
  return out;
}

Image strong_augment(const Image& image, Rng& rng, const AugmentConfig& cfg,
                     std::vector<AugOp>* applied) {
  std::array<int, kAugPoolSize> pool;
  std::iota(pool.begin(), pool.end(), 0);
  const int count = std::clamp(cfg.strong_ops, 0, kAugPoolSize);
  Image out = image;
  if (applied) applied->clear();
  for (int i = 0; i < count; ++i) {
    // partial Fisher-Yates: distinct ops per draw
    const int j = uniform_int(rng, i, kAugPoolSize - 1);
    std::swap(pool[i], pool[j]);
    const auto op = static_cast<AugOp>(pool[i]);
    const double m = uniform01(rng) * cfg.max_magnitude;
    const bool positive = uniform01(rng) < 0.5;
    out = apply_op(out, op, m, positive);
    if (applied) applied->push_back(op);
  }
  const int side = static_cast<int>(std::lround(cfg.cutout_fraction * std::min(image.height, image.width)));
  if (side > 0) {
    const int cy = uniform_int(rng, 0, image.height - 1);
    const int cx = uniform_int(rng, 0, image.width - 1);
    out = cutout(out, cy, cx, side);
  }
  clip(out);
  return out;
}

ViewSet make_views(const Image& image, std::uint64_t seed, std::uint64_t sample_key,
                   std::uint64_t iteration, const AugmentConfig& cfg, bool want_strong,
                   bool want_rotations) {
  Rng rng = make_rng(seed, Stream::kView, {sample_key, iteration});
  ViewSet v;
  v.weak = weak_augment(image, rng, cfg);
  if (want_strong) {
    Image base = weak_augment(image, rng, cfg);
    v.strong = strong_augment(base, rng, cfg);
  }
  if (want_rotations) {
    const Image& src = cfg.rotate_weak_view ? v.weak : image;
    for (int k = 0; k < 4; ++k) v.rotations[k] = rotate(src, k);
  }
  return v;
}

}  // namespace cmssl
