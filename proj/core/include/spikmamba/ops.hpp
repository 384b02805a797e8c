#ifndef SPIKMAMBA_OPS_HPP
#define SPIKMAMBA_OPS_HPP

#include <array>
#include <cstdint>
#include <vector>

#include "spikmamba/tensor.hpp"

namespace spikmamba {

// Dense op set with reverse-mode gradients. Binary elementwise ops broadcast
// with trailing-dimension alignment (size-1 dims stretch). All ops are
// deterministic for fixed inputs; gradients accumulate (+=) into existing
// buffers.

// [..., M, K] @ [..., K, N] -> [..., M, N]. Leading dims must match exactly
// or be absent on one side (shared weight across the batch); no other
// broadcasting.
Tensor matmul(const Tensor& a, const Tensor& b);

// x: (B, C_in, T, H, W) or (C_in, T, H, W); weight: (C_out, C_in, kT, kH, kW).
// Valid cross-correlation, no padding. Output (B, C_out, T', H', W') with
// T' = (T - kT) / sT + 1 etc.
Tensor conv3d(const Tensor& x, const Tensor& weight, std::array<int, 3> stride);

// Per-channel causal convolution. x: (D, L) or (B, D, L); weight: (D, k) with
// weight[:, 0] the current tap: y[l] = sum_j w[j] * x[l - j], x[<0] = 0.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& weight);

struct BatchNormState {
  Tensor gamma;         // (C,), learnable scale
  Tensor beta;          // (C,), learnable shift
  Tensor running_mean;  // (C,), not trained
  Tensor running_var;   // (C,), not trained
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::int64_t channels, DType dt);
};

// x: (B, C, ...). Training mode normalizes by batch statistics (biased
// variance) and folds them into the running stats with `momentum`; eval mode
// uses the running stats. Before any training step the running stats are the
// init values (mean 0, var 1).
Tensor batchnorm(const Tensor& x, BatchNormState& state, bool training);

// Unary elementwise.
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // throws DomainError on non-positive input
Tensor softplus(const Tensor& x);  // log(1 + exp(x)); x > 30 -> x
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

// Binary elementwise with trailing-dim broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);

// Reductions. Axes must be valid and non-empty dims; result drops the
// reduced axes (or keeps them as size 1 when keepdims).
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);

// Materializing axis permutation; perm is a permutation of 0..ndim-1.
Tensor permute(const Tensor& x, const std::vector<int>& perm);
// Swap the two leading axes; common (B, T, ...) <-> (T, B, ...) shuttle.
Tensor swap_axes01(const Tensor& x);

}  // namespace spikmamba

#endif  // SPIKMAMBA_OPS_HPP
