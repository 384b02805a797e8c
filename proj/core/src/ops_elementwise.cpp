#include <cmath>

#include "kernel_utils.hpp"
#include "spikmamba/ops.hpp"

namespace spikmamba {

using detail::i64;

namespace {

// Unary op plumbing: forward maps x -> f(x); backward maps (x, y, gy) -> gx.
template <typename T, typename FwdFn>
Tensor unary_forward(const Tensor& x, FwdFn f) {
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  const T* px = x.data<T>();
  T* py = out.data<T>();
  i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) py[i] = f(px[i]);
  return out;
}

template <typename DFn>
void record_unary(const Tensor& x, Tensor& out, DFn dfdx) {
  if (!detail::wants_grad({&x})) return;
  out.set_requires_grad(true);
  Tensor xc = x, oc = out;
  Tape::active()->record([xc, oc, dfdx]() mutable {
    if (!oc.has_grad()) return;
    i64 n = xc.numel();
    if (xc.dtype() == DType::F32) {
      const float* gy = oc.grad_data<float>();
      const float* px = xc.data<float>();
      const float* py = oc.data<float>();
      float* gx = xc.grad_data<float>();
      for (i64 i = 0; i < n; ++i) gx[i] += gy[i] * static_cast<float>(dfdx(px[i], py[i]));
    } else {
      const double* gy = oc.grad_data<double>();
      const double* px = xc.data<double>();
      const double* py = oc.data<double>();
      double* gx = xc.grad_data<double>();
      for (i64 i = 0; i < n; ++i) gx[i] += gy[i] * dfdx(static_cast<double>(px[i]), py[i]);
    }
  });
}

template <typename FwdF32, typename FwdF64>
Tensor unary_op(const Tensor& x, FwdF32 f32, FwdF64 f64) {
  if (x.dtype() == DType::F32) return unary_forward<float>(x, f32);
  return unary_forward<double>(x, f64);
}

template <typename T>
T sigmoid_scalar(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace

Tensor exp(const Tensor& x) {
  Tensor out = unary_op(
      x, [](float v) { return std::exp(v); }, [](double v) { return std::exp(v); });
  record_unary(x, out, [](double, double y) { return y; });
  return out;
}

Tensor log(const Tensor& x) {
  {
    i64 n = x.numel();
    for (i64 i = 0; i < n; ++i) {
      if (x.at(i) <= 0.0) throw DomainError("log of non-positive value " + std::to_string(x.at(i)));
    }
  }
  Tensor out = unary_op(
      x, [](float v) { return std::log(v); }, [](double v) { return std::log(v); });
  record_unary(x, out, [](double v, double) { return 1.0 / v; });
  return out;
}

Tensor softplus(const Tensor& x) {
  // log(1 + exp(v)) with overflow guard: v > 30 -> v.
  Tensor out = unary_op(
      x, [](float v) { return v > 30.0f ? v : std::log1p(std::exp(v)); },
      [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); });
  record_unary(x, out, [](double v, double) { return sigmoid_scalar(v); });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = unary_op(
      x, [](float v) { return sigmoid_scalar(v); }, [](double v) { return sigmoid_scalar(v); });
  record_unary(x, out, [](double, double y) { return y * (1.0 - y); });
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = unary_op(
      x, [](float v) { return v * sigmoid_scalar(v); },
      [](double v) { return v * sigmoid_scalar(v); });
  record_unary(x, out, [](double v, double) {
    double s = sigmoid_scalar(v);
    return s * (1.0 + v * (1.0 - s));
  });
  return out;
}

Tensor neg(const Tensor& x) {
  Tensor out = unary_op(
      x, [](float v) { return -v; }, [](double v) { return -v; });
  record_unary(x, out, [](double, double) { return -1.0; });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = unary_op(
      x, [factor](float v) { return static_cast<float>(v * factor); },
      [factor](double v) { return v * factor; });
  record_unary(x, out, [factor](double, double) { return factor; });
  return out;
}

namespace {

// Sums `grad` (shaped `out_shape`) down to `in_shape`, accumulating into gx.
template <typename T>
void reduce_grad_to(const T* grad, const Shape& out_shape, T* gx, const Shape& in_shape) {
  auto gstrides = detail::row_major_strides(out_shape);
  auto xstrides = detail::broadcast_strides(in_shape, out_shape);
  i64 n = shape_numel(out_shape);
  std::size_t nd = out_shape.size();
  std::vector<i64> idx(nd, 0);
  for (i64 flat = 0; flat < n; ++flat) {
    i64 xoff = 0;
    for (std::size_t d = 0; d < nd; ++d) xoff += idx[d] * xstrides[d];
    gx[xoff] += grad[flat];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
}

enum class BinKind { Add, Mul };

template <typename T>
void binary_forward(const Tensor& a, const Tensor& b, Tensor& out, BinKind kind) {
  const Shape& os = out.shape();
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  T* po = out.data<T>();
  i64 n = out.numel();
  if (a.shape() == b.shape()) {  // fast path, no index math
    if (kind == BinKind::Add) {
      for (i64 i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    } else {
      for (i64 i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    }
    return;
  }
  auto sa = detail::broadcast_strides(a.shape(), os);
  auto sb = detail::broadcast_strides(b.shape(), os);
  std::size_t nd = os.size();
  std::vector<i64> idx(nd, 0);
  for (i64 flat = 0; flat < n; ++flat) {
    i64 oa = 0, ob = 0;
    for (std::size_t d = 0; d < nd; ++d) {
      oa += idx[d] * sa[d];
      ob += idx[d] * sb[d];
    }
    po[flat] = kind == BinKind::Add ? pa[oa] + pb[ob] : pa[oa] * pb[ob];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
}

template <typename T>
void binary_backward(Tensor& a, Tensor& b, Tensor& out, BinKind kind) {
  const T* gy = out.grad_data<T>();
  const Shape& os = out.shape();
  i64 n = out.numel();
  bool same = a.shape() == b.shape() && a.shape() == os;
  if (kind == BinKind::Add) {
    if (a.requires_grad()) {
      T* ga = a.grad_data<T>();
      if (same) {
        for (i64 i = 0; i < n; ++i) ga[i] += gy[i];
      } else {
        reduce_grad_to<T>(gy, os, ga, a.shape());
      }
    }
    if (b.requires_grad()) {
      T* gb = b.grad_data<T>();
      if (same) {
        for (i64 i = 0; i < n; ++i) gb[i] += gy[i];
      } else {
        reduce_grad_to<T>(gy, os, gb, b.shape());
      }
    }
    return;
  }
  // Hadamard: d/da = gy * b, d/db = gy * a, each reduced to operand shape.
  auto scaled_into = [&](Tensor& target, const Tensor& other) {
    T* gt = target.grad_data<T>();
    const T* pother = other.data<T>();
    if (same) {
      for (i64 i = 0; i < n; ++i) gt[i] += gy[i] * pother[i];
      return;
    }
    std::vector<T> tmp(static_cast<std::size_t>(n));
    auto so = detail::broadcast_strides(other.shape(), os);
    std::size_t nd = os.size();
    std::vector<i64> idx(nd, 0);
    for (i64 flat = 0; flat < n; ++flat) {
      i64 off = 0;
      for (std::size_t d = 0; d < nd; ++d) off += idx[d] * so[d];
      tmp[static_cast<std::size_t>(flat)] = gy[flat] * pother[off];
      for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
        if (++idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
    reduce_grad_to<T>(tmp.data(), os, gt, target.shape());
  };
  if (a.requires_grad()) scaled_into(a, b);
  if (b.requires_grad()) scaled_into(b, a);
}

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  if (a.dtype() != b.dtype()) throw ContractError("binary op dtype mismatch");
  Shape os = detail::broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::empty(os, a.dtype());
  if (a.dtype() == DType::F32) {
    binary_forward<float>(a, b, out, kind);
  } else {
    binary_forward<double>(a, b, out, kind);
  }
  if (detail::wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record([ac, bc, oc, kind]() mutable {
      if (!oc.has_grad()) return;
      if (oc.dtype() == DType::F32) {
        binary_backward<float>(ac, bc, oc, kind);
      } else {
        binary_backward<double>(ac, bc, oc, kind);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add); }
Tensor hadamard(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul); }

}  // namespace spikmamba
