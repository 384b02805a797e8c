#include "kernel_utils.hpp"
#include "spikmamba/ops.hpp"

namespace spikmamba {

using detail::gemm_nn;
using detail::i64;
using detail::transpose2d;

namespace {

template <typename T>
void matmul_forward(const Tensor& a, const Tensor& b, Tensor& out, i64 batch, i64 m, i64 k, i64 n,
                    bool a_batched, bool b_batched) {
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  T* pc = out.data<T>();
  if (!b_batched) {
    // (batch*m, k) @ (k, n) in one pass.
    gemm_nn<T>(batch * m, k, n, pa, pb, pc, false);
    return;
  }
  for (i64 i = 0; i < batch; ++i) {
    gemm_nn<T>(m, k, n, pa + (a_batched ? i * m * k : 0), pb + i * k * n, pc + i * m * n, false);
  }
}

template <typename T>
void matmul_backward(Tensor& a, Tensor& b, const Tensor& out, i64 batch, i64 m, i64 k, i64 n,
                     bool a_batched, bool b_batched) {
  const T* gy = const_cast<Tensor&>(out).grad_data<T>();
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  if (a.requires_grad()) {
    T* ga = a.grad_data<T>();
    if (!b_batched) {
      auto bt = transpose2d<T>(k, n, pb);  // (n, k)
      gemm_nn<T>(batch * m, n, k, gy, bt.data(), ga, true);
    } else {
      for (i64 i = 0; i < batch; ++i) {
        auto bt = transpose2d<T>(k, n, pb + i * k * n);
        gemm_nn<T>(m, n, k, gy + i * m * n, bt.data(), ga + (a_batched ? i * m * k : 0), true);
      }
    }
  }
  if (b.requires_grad()) {
    T* gb = b.grad_data<T>();
    if (!b_batched) {
      // Summing over the flattened batch falls out of the single gemm.
      auto at = transpose2d<T>(batch * m, k, pa);  // (k, batch*m)
      gemm_nn<T>(k, batch * m, n, at.data(), gy, gb, true);
    } else {
      for (i64 i = 0; i < batch; ++i) {
        auto at = transpose2d<T>(m, k, pa + (a_batched ? i * m * k : 0));
        gemm_nn<T>(k, m, n, at.data(), gy + i * m * n, gb + i * k * n, true);
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  if (a.dtype() != b.dtype()) throw ContractError("matmul dtype mismatch");
  i64 m = a.dim(a.ndim() - 2), ka = a.dim(a.ndim() - 1);
  i64 kb = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  if (ka != kb) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (!lead_a.empty() && !lead_b.empty() && lead_a != lead_b) {
    throw ShapeError("matmul leading batch dims disagree: " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  Shape lead = lead_a.empty() ? lead_b : lead_a;
  i64 batch = shape_numel(lead);
  bool a_batched = !lead_a.empty();
  bool b_batched = !lead_b.empty();

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = Tensor::empty(out_shape, a.dtype());

  if (a.dtype() == DType::F32) {
    matmul_forward<float>(a, b, out, batch, m, ka, n, a_batched, b_batched);
  } else {
    matmul_forward<double>(a, b, out, batch, m, ka, n, a_batched, b_batched);
  }

  if (detail::wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record([ac, bc, oc, batch, m, ka, n, a_batched, b_batched]() mutable {
      if (!oc.has_grad()) return;
      if (oc.dtype() == DType::F32) {
        matmul_backward<float>(ac, bc, oc, batch, m, ka, n, a_batched, b_batched);
      } else {
        matmul_backward<double>(ac, bc, oc, batch, m, ka, n, a_batched, b_batched);
      }
    });
  }
  return out;
}

}  // namespace spikmamba
