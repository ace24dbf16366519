#pragma once

// Numeric kernels behind the network layers.
//
// Two implementations share every signature:
//   cmssl::kernels            OpenMP-parallel, im2col + blocked GEMM
//   cmssl::kernels::reference serial direct loops, kept as the test oracle
//
// The parallel versions are deterministic regardless of thread count:
// reductions across batch entries go through fixed-size chunks that are
// summed in chunk order.

#include <span>

namespace cmssl::kernels {

struct ConvGeom {
  int n = 1;     // batch
  int cin = 1;
  int h = 1;
  int w = 1;
  int cout = 1;
  int k = 3;     // square kernel
  int stride = 1;
  int pad = 1;

  int out_h() const { return (h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (w + 2 * pad - k) / stride + 1; }
  int in_size() const { return cin * h * w; }
  int out_size() const { return cout * out_h() * out_w(); }
  int weight_size() const { return cout * cin * k * k; }
};

/// Images per reduction chunk in the backward passes.
inline constexpr int kReduceChunk = 16;

int max_threads();

template <class T>
void conv2d_forward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                    std::span<T> y);

/// Accumulates into dweight; dx is overwritten unless empty (first layer).
template <class T>
void conv2d_backward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight);

/// Batch-statistics normalization; writes the per-channel mean and 1/sqrt(var+eps).
template <class T>
void batchnorm_forward_train(int n, int c, int hw, std::span<const T> x,
                             std::span<const T> gamma, std::span<const T> beta, T eps,
                             std::span<T> y, std::span<T> mean, std::span<T> invstd);

template <class T>
void batchnorm_forward_infer(int n, int c, int hw, std::span<const T> x,
                             std::span<const T> gamma, std::span<const T> beta,
                             std::span<const T> running_mean, std::span<const T> running_var,
                             T eps, std::span<T> y);

/// Accumulates into dgamma/dbeta; overwrites dx.
template <class T>
void batchnorm_backward(int n, int c, int hw, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> mean, std::span<const T> invstd,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta);

/// y = x W^T + b with W stored (out, in). Bias may be empty.
template <class T>
void linear_forward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);

/// Accumulates dweight/dbias; overwrites dx unless empty.
template <class T>
void linear_backward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias);

template <class T>
void relu_forward(std::span<const T> x, std::span<T> y);

/// dx = dy where y > 0. dx may alias dy.
template <class T>
void relu_backward(std::span<const T> y, std::span<const T> dy, std::span<T> dx);

template <class T>
void global_avg_pool_forward(int n, int c, int hw, std::span<const T> x, std::span<T> y);

template <class T>
void global_avg_pool_backward(int n, int c, int hw, std::span<const T> dy, std::span<T> dx);

namespace reference {

template <class T>
void conv2d_forward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                    std::span<T> y);
template <class T>
void conv2d_backward(const ConvGeom& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight);
template <class T>
void batchnorm_forward_train(int n, int c, int hw, std::span<const T> x,
                             std::span<const T> gamma, std::span<const T> beta, T eps,
                             std::span<T> y, std::span<T> mean, std::span<T> invstd);
template <class T>
void batchnorm_backward(int n, int c, int hw, std::span<const T> x, std::span<const T> gamma,
                        std::span<const T> mean, std::span<const T> invstd,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta);
template <class T>
void linear_forward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);
template <class T>
void linear_backward(int n, int in, int out, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias);

}  // namespace reference
}  // namespace cmssl::kernels
