#include "cmssl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cmssl::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

int chunk_count(int n) { return (n + kReduceChunk - 1) / kReduceChunk; }

constexpr int kMR = 4;

// C(MxN) (+)= A(MxK) B(KxN), row-major with leading dimensions. Register tiles
// of kMR rows by one cache line pair of columns.
template <class T>
void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate) {
  constexpr int NR = 256 / sizeof(T);
  int j0 = 0;
  for (; j0 + NR <= N; j0 += NR) {
    int i = 0;
    for (; i + kMR <= M; i += kMR) {
      T acc[kMR][NR] = {};
      for (int k = 0; k < K; ++k) {
        const T* b = B + static_cast<std::size_t>(k) * ldb + j0;
        for (int r = 0; r < kMR; ++r) {
          const T a = A[static_cast<std::size_t>(i + r) * lda + k];
#pragma omp simd
          for (int jj = 0; jj < NR; ++jj) acc[r][jj] += a * b[jj];
        }
      }
      for (int r = 0; r < kMR; ++r) {
        T* c = C + static_cast<std::size_t>(i + r) * ldc + j0;
        if (accumulate)
          for (int jj = 0; jj < NR; ++jj) c[jj] += acc[r][jj];
        else
          for (int jj = 0; jj < NR; ++jj) c[jj] = acc[r][jj];
      }
    }
    for (; i < M; ++i) {
      T acc[NR] = {};
      for (int k = 0; k < K; ++k) {
        const T a = A[static_cast<std::size_t>(i) * lda + k];
        const T* b = B + static_cast<std::size_t>(k) * ldb + j0;
#pragma omp simd
        for (int jj = 0; jj < NR; ++jj) acc[jj] += a * b[jj];
      }
      T* c = C + static_cast<std::size_t>(i) * ldc + j0;
      for (int jj = 0; jj < NR; ++jj) c[jj] = accumulate ? c[jj] + acc[jj] : acc[jj];
    }
  }
  if (j0 == N) return;
  const int w = N - j0;
  for (int i = 0; i < M; ++i) {
    T acc[NR] = {};
    for (int k = 0; k < K; ++k) {
      const T a = A[static_cast<std::size_t>(i) * lda + k];
      const T* b = B + static_cast<std::size_t>(k) * ldb + j0;
      for (int jj = 0; jj < w; ++jj) acc[jj] += a * b[jj];
    }
    T* c = C + static_cast<std::size_t>(i) * ldc + j0;
    for (int jj = 0; jj < w; ++jj) c[jj] = accumulate ? c[jj] + acc[jj] : acc[jj];
  }
}

template <class T>
T dot(int K, const T* a, const T* b) {
  T s = 0;
#pragma omp simd reduction(+ : s)
  for (int k = 0; k < K; ++k) s += a[k] * b[k];
  return s;
}

// C(MxN) += A(MxK) B(NxK)^T as 4x4 blocks of vector-wide partial dot products.
template <class T>
void gemm_nt_acc(int M, int N, int K, const T* A, const T* B, T* C) {
  constexpr int V = 64 / sizeof(T);
  const int K0 = K / V * V, M4 = M / 4 * 4, N4 = N / 4 * 4;
  for (int i = 0; i < M4; i += 4) {
    for (int j = 0; j < N4; j += 4) {
      T acc[4][4][V] = {};
      for (int k = 0; k < K0; k += V) {
        for (int r = 0; r < 4; ++r) {
          const T* a = A + static_cast<std::size_t>(i + r) * K + k;
          for (int c = 0; c < 4; ++c) {
            const T* b = B + static_cast<std::size_t>(j + c) * K + k;
#pragma omp simd
            for (int v = 0; v < V; ++v) acc[r][c][v] += a[v] * b[v];
          }
        }
      }
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
          T s = 0;
          for (int v = 0; v < V; ++v) s += acc[r][c][v];
          s += dot(K - K0, A + static_cast<std::size_t>(i + r) * K + K0,
                   B + static_cast<std::size_t>(j + c) * K + K0);
          C[static_cast<std::size_t>(i + r) * N + j + c] += s;
        }
      }
    }
  }
  for (int i = 0; i < M; ++i)
    for (int j = (i < M4 ? N4 : 0); j < N; ++j)
      C[static_cast<std::size_t>(i) * N + j] +=
          dot(K, A + static_cast<std::size_t>(i) * K, B + static_cast<std::size_t>(j) * K);
}

// Gather plan for one geometry: images are first copied into a zero-padded
// buffer, after which tap t of output pixel p reads padded[ci][offset[t][p]].
struct TapTable {
  int hp = 0, wp = 0;
  std::vector<int> offset;  // k*k x P

  explicit TapTable(const ConvGeom& g) : hp(g.h + 2 * g.pad), wp(g.w + 2 * g.pad) {
    const int oh = g.out_h(), ow = g.out_w(), P = oh * ow;
    offset.resize(static_cast<std::size_t>(g.k) * g.k * P);
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox)
            offset[(static_cast<std::size_t>(ky * g.k + kx) * oh + oy) * ow + ox] =
                (oy * g.stride + ky) * wp + ox * g.stride + kx;
  }
  int plane() const { return hp * wp; }
};

template <class T>
void pad_image(const ConvGeom& g, const TapTable& t, const T* x, T* padded) {
  for (int ci = 0; ci < g.cin; ++ci)
    for (int y = 0; y < g.h; ++y)
      std::copy_n(x + (ci * g.h + y) * g.w, g.w, padded + ci * t.plane() + (y + g.pad) * t.wp + g.pad);
}

// Columns of one image into a (CK x ld) matrix starting at column 0 of `col`.
template <class T>
void im2col(const ConvGeom& g, const TapTable& t, const T* padded, T* col, int ld) {
  const int P = g.out_h() * g.out_w(), taps = g.k * g.k;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* __restrict src = padded + ci * t.plane();
    for (int tap = 0; tap < taps; ++tap) {
      const int* __restrict off = t.offset.data() + static_cast<std::size_t>(tap) * P;
      T* __restrict d = col + static_cast<std::size_t>(ci * taps + tap) * ld;
#pragma omp simd
      for (int p = 0; p < P; ++p) d[p] = src[off[p]];
    }
  }
}

// Scatter-adds columns into a padded gradient buffer, then crops it into dx.
template <class T>
void col2im(const ConvGeom& g, const TapTable& t, const T* col, int ld, T* padded, T* dx) {
  const int P = g.out_h() * g.out_w(), taps = g.k * g.k;
  std::fill(padded, padded + static_cast<std::size_t>(g.cin) * t.plane(), T(0));
  for (int ci = 0; ci < g.cin; ++ci) {
    T* dst = padded + ci * t.plane();
    for (int tap = 0; tap < taps; ++tap) {
      const int* off = t.offset.data() + static_cast<std::size_t>(tap) * P;
      const T* s = col + static_cast<std::size_t>(ci * taps + tap) * ld;
      for (int p = 0; p < P; ++p) dst[off[p]] += s[p];
    }
  }
  for (int ci = 0; ci < g.cin; ++ci)
    for (int y = 0; y < g.h; ++y)
      std::copy_n(padded + ci * t.plane() + (y + g.pad) * t.wp + g.pad, g.w, dx + (ci * g.h + y) * g.w);
}

}  // namespace

// Both passes work on chunks of kReduceChunk images laid side by side, so one
// GEMM covers chunk * out_h * out_w columns.
template <class T>
void conv2d_forward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                    std::span<T> y) {
  const int P = g.out_h() * g.out_w();
  const int CK = g.cin * g.k * g.k;
  const int chunks = chunk_count(g.n);
  const TapTable table(g);
#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(CK) * P * kReduceChunk);
    std::vector<T> out(static_cast<std::size_t>(g.cout) * P * kReduceChunk);
    std::vector<T> padded(static_cast<std::size_t>(g.cin) * table.plane(), T(0));
#pragma omp for schedule(static)
    for (int ch = 0; ch < chunks; ++ch) {
      const int begin = ch * kReduceChunk, nc = std::min(g.n, begin + kReduceChunk) - begin;
      const int ld = nc * P;
      for (int i = 0; i < nc; ++i) {
        pad_image(g, table, x.data() + static_cast<std::size_t>(begin + i) * g.in_size(), padded.data());
        im2col(g, table, padded.data(), col.data() + i * P, ld);
      }
      gemm_nn(g.cout, ld, CK, weight.data(), CK, col.data(), ld, out.data(), ld, false);
      for (int i = 0; i < nc; ++i) {
        T* yi = y.data() + static_cast<std::size_t>(begin + i) * g.out_size();
        for (int co = 0; co < g.cout; ++co)
          std::copy_n(out.data() + static_cast<std::size_t>(co) * ld + i * P, P, yi + co * P);
      }
    }
  }
}

template <class T>
void conv2d_backward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight) {
  const int P = g.out_h() * g.out_w();
  const int CK = g.cin * g.k * g.k;
  const int W = g.weight_size();
  const int chunks = chunk_count(g.n);
  std::vector<T> wt(static_cast<std::size_t>(CK) * g.cout);
  for (int co = 0; co < g.cout; ++co)
    for (int j = 0; j < CK; ++j) wt[static_cast<std::size_t>(j) * g.cout + co] = weight[co * CK + j];
  std::vector<T> partial(static_cast<std::size_t>(chunks) * W, T(0));
  const TapTable table(g);
#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(CK) * P * kReduceChunk);
    std::vector<T> dyc(static_cast<std::size_t>(g.cout) * P * kReduceChunk);
    std::vector<T> padded(static_cast<std::size_t>(g.cin) * table.plane(), T(0));
    std::vector<T> scratch(dx.empty() ? 0 : padded.size());
#pragma omp for schedule(static)
    for (int ch = 0; ch < chunks; ++ch) {
      const int begin = ch * kReduceChunk, nc = std::min(g.n, begin + kReduceChunk) - begin;
      const int ld = nc * P;
      for (int i = 0; i < nc; ++i) {
        const T* dyi = dy.data() + static_cast<std::size_t>(begin + i) * g.out_size();
        for (int co = 0; co < g.cout; ++co)
          std::copy_n(dyi + co * P, P, dyc.data() + static_cast<std::size_t>(co) * ld + i * P);
        pad_image(g, table, x.data() + static_cast<std::size_t>(begin + i) * g.in_size(), padded.data());
        im2col(g, table, padded.data(), col.data() + i * P, ld);
      }
      gemm_nt_acc(g.cout, CK, ld, dyc.data(), col.data(), partial.data() + static_cast<std::size_t>(ch) * W);
      if (!dx.empty()) {
        gemm_nn(CK, ld, g.cout, wt.data(), g.cout, dyc.data(), ld, col.data(), ld, false);
        for (int i = 0; i < nc; ++i)
          col2im(g, table, col.data() + i * P, ld, scratch.data(),
                 dx.data() + static_cast<std::size_t>(begin + i) * g.in_size());
      }
    }
  }
  for (int ch = 0; ch < chunks; ++ch) {
    const T* p = partial.data() + static_cast<std::size_t>(ch) * W;
    for (int j = 0; j < W; ++j) dweight[j] += p[j];
  }
}

template <class T>
void batchnorm_forward_train(int n, int c, int hw, std::span<const T> x,
                             std::span<const T> gamma, std::span<const T> beta, T eps,
                             std::span<T> y, std::span<T> mean, std::span<T> invstd) {
  const double count = static_cast<double>(n) * hw;
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      T part = 0;
#pragma omp simd reduction(+ : part)
      for (int j = 0; j < hw; ++j) part += p[j];
      s += part;
    }
    const double mu = s / count;
    double v = 0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      T part = 0;
      const T m = static_cast<T>(mu);
#pragma omp simd reduction(+ : part)
      for (int j = 0; j < hw; ++j) part += (p[j] - m) * (p[j] - m);
      v += part;
    }
    const T is = static_cast<T>(1.0 / std::sqrt(v / count + eps));
    mean[ch] = static_cast<T>(mu);
    invstd[ch] = is;
    const T scale = gamma[ch] * is;
    const T shift = beta[ch] - static_cast<T>(mu) * scale;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      const T* p = x.data() + off;
      T* q = y.data() + off;
#pragma omp simd
      for (int j = 0; j < hw; ++j) q[j] = p[j] * scale + shift;
    }
  }
}

template <class T>
void batchnorm_forward_infer(int n, int c, int hw, std::span<const T> x,
                             std::span<const T> gamma, std::span<const T> beta,
                             std::span<const T> running_mean, std::span<const T> running_var,
                             T eps, std::span<T> y) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T scale = gamma[ch] / std::sqrt(running_var[ch] + eps);
      const T shift = beta[ch] - running_mean[ch] * scale;
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      const T* p = x.data() + off;
      T* q = y.data() + off;
#pragma omp simd
      for (int j = 0; j < hw; ++j) q[j] = p[j] * scale + shift;
    }
  }
}

template <class T>
void batchnorm_backward(int n, int c, int hw, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> mean, std::span<const T> invstd,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta) {
  const double count = static_cast<double>(n) * hw;
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    const T mu = mean[ch], is = invstd[ch];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      const T* p = x.data() + off;
      const T* d = dy.data() + off;
      T a = 0, b = 0;
#pragma omp simd reduction(+ : a, b)
      for (int j = 0; j < hw; ++j) {
        a += d[j];
        b += d[j] * (p[j] - mu) * is;
      }
      sum_dy += a;
      sum_dy_xhat += b;
    }
    dgamma[ch] += static_cast<T>(sum_dy_xhat);
    dbeta[ch] += static_cast<T>(sum_dy);
    const T k = gamma[ch] * is;
    const T mdy = static_cast<T>(sum_dy / count);
    const T mdyx = static_cast<T>(sum_dy_xhat / count);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      const T* p = x.data() + off;
      const T* d = dy.data() + off;
      T* o = dx.data() + off;
#pragma omp simd
      for (int j = 0; j < hw; ++j) o[j] = k * (d[j] - mdy - (p[j] - mu) * is * mdyx);
    }
  }
}

template <class T>
void linear_forward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const T* xi = x.data() + static_cast<std::size_t>(i) * in;
    for (int o = 0; o < out; ++o) {
      const T* wo = weight.data() + static_cast<std::size_t>(o) * in;
      T s = 0;
#pragma omp simd reduction(+ : s)
      for (int k = 0; k < in; ++k) s += xi[k] * wo[k];
      y[static_cast<std::size_t>(i) * out + o] = s + (bias.empty() ? T(0) : bias[o]);
    }
  }
}

template <class T>
void linear_backward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out; ++o) {
    T* dw = dweight.data() + static_cast<std::size_t>(o) * in;
    T db = 0;
    for (int i = 0; i < n; ++i) {
      const T g = dy[static_cast<std::size_t>(i) * out + o];
      if (g == T(0)) continue;
      db += g;
      const T* xi = x.data() + static_cast<std::size_t>(i) * in;
#pragma omp simd
      for (int k = 0; k < in; ++k) dw[k] += g * xi[k];
    }
    if (!dbias.empty()) dbias[o] += db;
  }
  if (dx.empty()) return;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    T* dxi = dx.data() + static_cast<std::size_t>(i) * in;
    std::fill(dxi, dxi + in, T(0));
    for (int o = 0; o < out; ++o) {
      const T g = dy[static_cast<std::size_t>(i) * out + o];
      if (g == T(0)) continue;
      const T* wo = weight.data() + static_cast<std::size_t>(o) * in;
#pragma omp simd
      for (int k = 0; k < in; ++k) dxi[k] += g * wo[k];
    }
  }
}

template <class T>
void relu_forward(std::span<const T> x, std::span<T> y) {
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_backward(std::span<const T> y, std::span<const T> dy, std::span<T> dx) {
  const std::size_t n = y.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
}

template <class T>
void global_avg_pool_forward(int n, int c, int hw, std::span<const T> x, std::span<T> y) {
  const T inv = T(1) / static_cast<T>(hw);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n * c; ++i) {
    const T* p = x.data() + static_cast<std::size_t>(i) * hw;
    T s = 0;
    for (int j = 0; j < hw; ++j) s += p[j];
    y[i] = s * inv;
  }
}

template <class T>
void global_avg_pool_backward(int n, int c, int hw, std::span<const T> dy, std::span<T> dx) {
  const T inv = T(1) / static_cast<T>(hw);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n * c; ++i) {
    T* p = dx.data() + static_cast<std::size_t>(i) * hw;
    const T g = dy[i] * inv;
    for (int j = 0; j < hw; ++j) p[j] = g;
  }
}

#define CMSSL_INSTANTIATE(T)                                                                   \
  template void conv2d_forward<T>(const ConvGeom&, std::span<const T>, std::span<const T>,    \
                                 std::span<T>);                                               \
  template void conv2d_backward<T>(const ConvGeom&, std::span<const T>, std::span<const T>,   \
                                  std::span<const T>, std::span<T>, std::span<T>);            \
  template void batchnorm_forward_train<T>(int, int, int, std::span<const T>,                 \
                                          std::span<const T>, std::span<const T>, T,          \
                                          std::span<T>, std::span<T>, std::span<T>);          \
  template void batchnorm_forward_infer<T>(int, int, int, std::span<const T>,                 \
                                          std::span<const T>, std::span<const T>,             \
                                          std::span<const T>, std::span<const T>, T,          \
                                          std::span<T>);                                      \
  template void batchnorm_backward<T>(int, int, int, std::span<const T>, std::span<const T>,  \
                                     std::span<const T>, std::span<const T>,                  \
                                     std::span<const T>, std::span<T>, std::span<T>,          \
                                     std::span<T>);                                           \
  template void linear_forward<T>(int, int, int, std::span<const T>, std::span<const T>,      \
                                 std::span<const T>, std::span<T>);                           \
  template void linear_backward<T>(int, int, int, std::span<const T>, std::span<const T>,     \
                                  std::span<const T>, std::span<T>, std::span<T>,             \
                                  std::span<T>);                                              \
  template void relu_forward<T>(std::span<const T>, std::span<T>);                            \
  template void relu_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);       \
  template void global_avg_pool_forward<T>(int, int, int, std::span<const T>, std::span<T>);  \
  template void global_avg_pool_backward<T>(int, int, int, std::span<const T>, std::span<T>);

CMSSL_INSTANTIATE(float)
CMSSL_INSTANTIATE(double)
#undef CMSSL_INSTANTIATE

}  // namespace cmssl::kernels
