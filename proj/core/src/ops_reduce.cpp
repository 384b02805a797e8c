#include <algorithm>
#include <cstring>

#include "kernel_utils.hpp"
#include "spikmamba/ops.hpp"

namespace spikmamba {

using detail::i64;

namespace {

void check_axes(const Tensor& x, const std::vector<int>& axes) {
  if (axes.empty()) throw DomainError("reduction axis list is empty");
  std::vector<int> seen;
  for (int a : axes) {
    if (a < 0 || a >= x.ndim()) {
      throw DomainError("reduction axis " + std::to_string(a) + " out of range for " +
                        shape_str(x.shape()));
    }
    if (std::find(seen.begin(), seen.end(), a) != seen.end()) {
      throw DomainError("duplicate reduction axis " + std::to_string(a));
    }
    seen.push_back(a);
  }
}

Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdims) {
  Shape out;
  for (int d = 0; d < static_cast<int>(in.size()); ++d) {
    bool reduced = std::find(axes.begin(), axes.end(), d) != axes.end();
    if (!reduced) {
      out.push_back(in[static_cast<std::size_t>(d)]);
    } else if (keepdims) {
      out.push_back(1);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

// Strides mapping a full-shape multi-index onto the reduced output buffer
// (reduced axes contribute stride 0).
std::vector<i64> reduction_out_strides(const Shape& in, const std::vector<int>& axes) {
  Shape kept = in;
  for (int a : axes) kept[static_cast<std::size_t>(a)] = 1;
  auto st = detail::row_major_strides(kept);
  for (int a : axes) st[static_cast<std::size_t>(a)] = 0;
  return st;
}

template <typename T>
void reduce_forward(const Tensor& x, Tensor& out, const std::vector<int>& axes, double inv_count) {
  const T* px = x.data<T>();
  T* po = out.data<T>();
  std::memset(po, 0, static_cast<std::size_t>(out.numel()) * sizeof(T));
  auto ostrides = reduction_out_strides(x.shape(), axes);
  const Shape& s = x.shape();
  std::size_t nd = s.size();
  std::vector<i64> idx(nd, 0);
  i64 n = x.numel();
  for (i64 flat = 0; flat < n; ++flat) {
    i64 off = 0;
    for (std::size_t d = 0; d < nd; ++d) off += idx[d] * ostrides[d];
    po[off] += px[flat];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < s[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  if (inv_count != 1.0) {
    i64 m = out.numel();
    for (i64 i = 0; i < m; ++i) po[i] = static_cast<T>(po[i] * inv_count);
  }
}

template <typename T>
void reduce_backward(Tensor& x, Tensor& out, const std::vector<int>& axes, double inv_count) {
  const T* gy = out.grad_data<T>();
  T* gx = x.grad_data<T>();
  auto ostrides = reduction_out_strides(x.shape(), axes);
  const Shape& s = x.shape();
  std::size_t nd = s.size();
  std::vector<i64> idx(nd, 0);
  i64 n = x.numel();
  for (i64 flat = 0; flat < n; ++flat) {
    i64 off = 0;
    for (std::size_t d = 0; d < nd; ++d) off += idx[d] * ostrides[d];
    gx[flat] += static_cast<T>(gy[off] * inv_count);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < s[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
}

Tensor reduce_op(const Tensor& x, const std::vector<int>& axes, bool keepdims, bool mean) {
  check_axes(x, axes);
  i64 count = 1;
  for (int a : axes) count *= x.dim(a);
  double inv_count = mean ? 1.0 / static_cast<double>(count) : 1.0;
  Tensor out = Tensor::empty(reduced_shape(x.shape(), axes, keepdims), x.dtype());
  if (x.dtype() == DType::F32) {
    reduce_forward<float>(x, out, axes, inv_count);
  } else {
    reduce_forward<double>(x, out, axes, inv_count);
  }
  if (detail::wants_grad({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record([xc, oc, axes, inv_count]() mutable {
      if (!oc.has_grad()) return;
      if (oc.dtype() == DType::F32) {
        reduce_backward<float>(xc, oc, axes, inv_count);
      } else {
        reduce_backward<double>(xc, oc, axes, inv_count);
      }
    });
  }
  return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_op(x, axes, keepdims, false);
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_op(x, axes, keepdims, true);
}

namespace {

template <typename T>
void permute_copy(const Tensor& in, Tensor& out, const std::vector<int>& perm) {
  const Shape& os = out.shape();
  auto in_strides = detail::row_major_strides(in.shape());
  std::vector<i64> src_strides(os.size());
  for (std::size_t d = 0; d < os.size(); ++d) {
    src_strides[d] = in_strides[static_cast<std::size_t>(perm[d])];
  }
  const T* src = in.data<T>();
  T* dst = out.data<T>();
  std::size_t nd = os.size();
  std::vector<i64> idx(nd, 0);
  i64 n = out.numel();
  i64 src_off = 0;
  for (i64 flat = 0; flat < n; ++flat) {
    dst[flat] = src[src_off];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      src_off += src_strides[du];
      if (++idx[du] < os[du]) break;
      src_off -= src_strides[du] * os[du];
      idx[du] = 0;
    }
  }
}

// grad wrt input = permute of output grad by the inverse permutation; done as
// a scatter with the same stride walk.
template <typename T>
void permute_backward(Tensor& in, Tensor& out, const std::vector<int>& perm) {
  const Shape& os = out.shape();
  auto in_strides = detail::row_major_strides(in.shape());
  std::vector<i64> src_strides(os.size());
  for (std::size_t d = 0; d < os.size(); ++d) {
    src_strides[d] = in_strides[static_cast<std::size_t>(perm[d])];
  }
  const T* gy = out.grad_data<T>();
  T* gx = in.grad_data<T>();
  std::size_t nd = os.size();
  std::vector<i64> idx(nd, 0);
  i64 n = out.numel();
  i64 src_off = 0;
  for (i64 flat = 0; flat < n; ++flat) {
    gx[src_off] += gy[flat];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      src_off += src_strides[du];
      if (++idx[du] < os[du]) break;
      src_off -= src_strides[du] * os[du];
      idx[du] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != x.ndim()) {
    throw ShapeError("permute arity mismatch for " + shape_str(x.shape()));
  }
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= x.ndim() || seen[static_cast<std::size_t>(p)]) {
      throw ShapeError("invalid permutation");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape os(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) os[d] = x.dim(perm[d]);
  Tensor out = Tensor::empty(os, x.dtype());
  if (x.dtype() == DType::F32) {
    permute_copy<float>(x, out, perm);
  } else {
    permute_copy<double>(x, out, perm);
  }
  if (detail::wants_grad({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record([xc, oc, perm]() mutable {
      if (!oc.has_grad()) return;
      if (oc.dtype() == DType::F32) {
        permute_backward<float>(xc, oc, perm);
      } else {
        permute_backward<double>(xc, oc, perm);
      }
    });
  }
  return out;
}

Tensor swap_axes01(const Tensor& x) {
  if (x.ndim() < 2) throw ShapeError("swap_axes01 needs rank >= 2");
  std::vector<int> perm(static_cast<std::size_t>(x.ndim()));
  for (int i = 0; i < x.ndim(); ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[0], perm[1]);
  return permute(x, perm);
}

}  // namespace spikmamba
