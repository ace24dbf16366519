#pragma once

#include <span>
#include <vector>

#include "cmssl/tensor.hpp"

namespace cmssl {

/// CHW image with values in [0, 1].
struct Image {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  bool operator==(const Image&) const = default;
};

/// Stacks images into an (N, C, H, W) tensor; all images must share one shape.
template <class T>
Tensor<T> to_tensor(std::span<const Image* const> images);

template <class T>
Tensor<T> to_tensor(std::span<const Image> images);

}  // namespace cmssl
