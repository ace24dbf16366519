// Serial direct-loop kernels. Slow on purpose: every index is spelled out so
// the optimized paths can be checked against them.

#include <cmath>

#include "cmssl/kernels.hpp"

namespace cmssl::kernels::reference {

template <class T>
void conv2d_forward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                    std::span<T> y) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int i = 0; i < g.n; ++i)
    for (int co = 0; co < g.cout; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double s = 0;
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ky = 0; ky < g.k; ++ky)
              for (int kx = 0; kx < g.k; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                s += static_cast<double>(x[((i * g.cin + ci) * g.h + iy) * g.w + ix]) *
                     weight[((co * g.cin + ci) * g.k + ky) * g.k + kx];
              }
          y[((i * g.cout + co) * oh + oy) * ow + ox] = static_cast<T>(s);
        }
}

template <class T>
void conv2d_backward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight) {
  const int oh = g.out_h(), ow = g.out_w();
  for (auto& v : dx) v = T(0);
  for (int i = 0; i < g.n; ++i)
    for (int co = 0; co < g.cout; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T d = dy[((i * g.cout + co) * oh + oy) * ow + ox];
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ky = 0; ky < g.k; ++ky)
              for (int kx = 0; kx < g.k; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                const int xi = ((i * g.cin + ci) * g.h + iy) * g.w + ix;
                const int wi = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                dweight[wi] += d * x[xi];
                if (!dx.empty()) dx[xi] += d * weight[wi];
              }
        }
}

template <class T>
void batchnorm_forward_train(int n, int c, int hw, std::span<const T> x,
                             std::span<const T> gamma, std::span<const T> beta, T eps,
                             std::span<T> y, std::span<T> mean, std::span<T> invstd) {
  for (int ch = 0; ch < c; ++ch) {
    double s = 0, ss = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) s += x[(i * c + ch) * hw + j];
    const double mu = s / (static_cast<double>(n) * hw);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) {
        const double d = x[(i * c + ch) * hw + j] - mu;
        ss += d * d;
      }
    const double var = ss / (static_cast<double>(n) * hw);
    const double is = 1.0 / std::sqrt(var + eps);
    mean[ch] = static_cast<T>(mu);
    invstd[ch] = static_cast<T>(is);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) {
        const int k = (i * c + ch) * hw + j;
        y[k] = static_cast<T>(gamma[ch] * (x[k] - mu) * is + beta[ch]);
      }
  }
}

template <class T>
void batchnorm_backward(int n, int c, int hw, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> mean, std::span<const T> invstd,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta) {
  const double m = static_cast<double>(n) * hw;
  for (int ch = 0; ch < c; ++ch) {
    double a = 0, b = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) {
        const int k = (i * c + ch) * hw + j;
        a += dy[k];
        b += dy[k] * (x[k] - mean[ch]) * invstd[ch];
      }
    dgamma[ch] += static_cast<T>(b);
    dbeta[ch] += static_cast<T>(a);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) {
        const int k = (i * c + ch) * hw + j;
        const double xhat = (x[k] - mean[ch]) * invstd[ch];
        dx[k] = static_cast<T>(gamma[ch] * invstd[ch] * (dy[k] - a / m - xhat * b / m));
      }
  }
}

template <class T>
void linear_forward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out; ++o) {
      double s = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
      for (int k = 0; k < in; ++k) s += static_cast<double>(x[i * in + k]) * weight[o * in + k];
      y[i * out + o] = static_cast<T>(s);
    }
}

template <class T>
void linear_backward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias) {
  for (auto& v : dx) v = T(0);
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out; ++o) {
      const T g = dy[i * out + o];
      if (!dbias.empty()) dbias[o] += g;
      for (int k = 0; k < in; ++k) {
        dweight[o * in + k] += g * x[i * in + k];
        if (!dx.empty()) dx[i * in + k] += g * weight[o * in + k];
      }
    }
}

#define CMSSL_INSTANTIATE(T)                                                                  \
  template void conv2d_forward<T>(const ConvGeom&, std::span<const T>, std::span<const T>,   \
                                 std::span<T>);                                              \
  template void conv2d_backward<T>(const ConvGeom&, std::span<const T>, std::span<const T>,  \
                                  std::span<const T>, std::span<T>, std::span<T>);           \
  template void batchnorm_forward_train<T>(int, int, int, std::span<const T>,                \
                                          std::span<const T>, std::span<const T>, T,         \
                                          std::span<T>, std::span<T>, std::span<T>);         \
  template void batchnorm_backward<T>(int, int, int, std::span<const T>, std::span<const T>, \
                                     std::span<const T>, std::span<const T>,                 \
                                     std::span<const T>, std::span<T>, std::span<T>,         \
                                     std::span<T>);                                          \
  template void linear_forward<T>(int, int, int, std::span<const T>, std::span<const T>,     \
                                 std::span<const T>, std::span<T>);                          \
  template void linear_backward<T>(int, int, int, std::span<const T>, std::span<const T>,    \
                                  std::span<const T>, std::span<T>, std::span<T>,            \
                                  std::span<T>);

CMSSL_INSTANTIATE(float)
CMSSL_INSTANTIATE(double)
#undef CMSSL_INSTANTIATE

}  // namespace cmssl::kernels::reference
