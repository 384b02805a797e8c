#include <cstring>

#include "kernel_utils.hpp"
#include "spikmamba/ops.hpp"

namespace spikmamba {

using detail::gemm_nn;
using detail::i64;
using detail::transpose2d;

namespace {

struct Conv3dDims {
  i64 batch, cin, t, h, w;
  i64 cout, kt, kh, kw;
  i64 st, sh, sw;
  i64 to, ho, wo;       // output spatial dims
  i64 ck() const { return cin * kt * kh * kw; }
  i64 patches() const { return to * ho * wo; }
};

Conv3dDims conv3d_dims(const Tensor& x, const Tensor& weight, std::array<int, 3> stride,
                       bool batched) {
  Conv3dDims d{};
  int off = batched ? 1 : 0;
  d.batch = batched ? x.dim(0) : 1;
  d.cin = x.dim(off + 0);
  d.t = x.dim(off + 1);
  d.h = x.dim(off + 2);
  d.w = x.dim(off + 3);
  d.cout = weight.dim(0);
  d.kt = weight.dim(2);
  d.kh = weight.dim(3);
  d.kw = weight.dim(4);
  d.st = stride[0];
  d.sh = stride[1];
  d.sw = stride[2];
  if (d.st < 1 || d.sh < 1 || d.sw < 1) throw ConfigError("conv3d stride must be >= 1");
  if (weight.dim(1) != d.cin) {
    throw ShapeError("conv3d channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  }
  if (d.kt > d.t || d.kh > d.h || d.kw > d.w) {
    throw ShapeError("conv3d kernel " + shape_str(weight.shape()) + " exceeds input " +
                     shape_str(x.shape()));
  }
  bool patchify = d.kt == d.st && d.kh == d.sh && d.kw == d.sw;
  if (patchify && (d.t % d.st || d.h % d.sh || d.w % d.sw)) {
    throw ShapeError("conv3d patchify input " + shape_str(x.shape()) +
                     " not divisible by stride (" + std::to_string(d.st) + "," +
                     std::to_string(d.sh) + "," + std::to_string(d.sw) + ")");
  }
  d.to = (d.t - d.kt) / d.st + 1;
  d.ho = (d.h - d.kh) / d.sh + 1;
  d.wo = (d.w - d.kw) / d.sw + 1;
  return d;
}

// colsT: (CK, P) gather of one sample's patches; row = (c, kt, kh, kw),
// column = output position (to, ho, wo).
template <typename T>
void im2col_t(const T* x, const Conv3dDims& d, T* colsT) {
  i64 p_total = d.patches();
  i64 row = 0;
  for (i64 c = 0; c < d.cin; ++c) {
    const T* xc = x + c * d.t * d.h * d.w;
    for (i64 kt = 0; kt < d.kt; ++kt) {
      for (i64 kh = 0; kh < d.kh; ++kh) {
        for (i64 kw = 0; kw < d.kw; ++kw, ++row) {
          T* out_row = colsT + row * p_total;
          i64 p = 0;
          for (i64 to = 0; to < d.to; ++to) {
            i64 it = to * d.st + kt;
            for (i64 ho = 0; ho < d.ho; ++ho) {
              i64 ih = ho * d.sh + kh;
              const T* src = xc + (it * d.h + ih) * d.w + kw;
              for (i64 wo = 0; wo < d.wo; ++wo, ++p) out_row[p] = src[wo * d.sw];
            }
          }
        }
      }
    }
  }
}

// Scatter-add of dcolsT back onto the input gradient.
template <typename T>
void col2im_t(const T* dcolsT, const Conv3dDims& d, T* gx) {
  i64 p_total = d.patches();
  i64 row = 0;
  for (i64 c = 0; c < d.cin; ++c) {
    T* xc = gx + c * d.t * d.h * d.w;
    for (i64 kt = 0; kt < d.kt; ++kt) {
      for (i64 kh = 0; kh < d.kh; ++kh) {
        for (i64 kw = 0; kw < d.kw; ++kw, ++row) {
          const T* g_row = dcolsT + row * p_total;
          i64 p = 0;
          for (i64 to = 0; to < d.to; ++to) {
            i64 it = to * d.st + kt;
            for (i64 ho = 0; ho < d.ho; ++ho) {
              i64 ih = ho * d.sh + kh;
              T* dst = xc + (it * d.h + ih) * d.w + kw;
              for (i64 wo = 0; wo < d.wo; ++wo, ++p) dst[wo * d.sw] += g_row[p];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_forward(const Tensor& x, const Tensor& weight, Tensor& out, const Conv3dDims& d) {
  const T* px = x.data<T>();
  const T* pw = weight.data<T>();
  T* po = out.data<T>();
  std::vector<T> colsT(static_cast<std::size_t>(d.ck() * d.patches()));
  i64 x_stride = d.cin * d.t * d.h * d.w;
  i64 o_stride = d.cout * d.patches();
  for (i64 b = 0; b < d.batch; ++b) {
    im2col_t<T>(px + b * x_stride, d, colsT.data());
    gemm_nn<T>(d.cout, d.ck(), d.patches(), pw, colsT.data(), po + b * o_stride, false);
  }
}

template <typename T>
void conv3d_backward(Tensor& x, Tensor& weight, Tensor& out, const Conv3dDims& d) {
  const T* gy = out.grad_data<T>();
  const T* px = x.data<T>();
  const T* pw = weight.data<T>();
  i64 x_stride = d.cin * d.t * d.h * d.w;
  i64 o_stride = d.cout * d.patches();
  std::vector<T> colsT(static_cast<std::size_t>(d.ck() * d.patches()));
  std::vector<T> wt;
  if (x.requires_grad()) wt = transpose2d<T>(d.cout, d.ck(), pw);
  std::vector<T> dcolsT(colsT.size());
  for (i64 b = 0; b < d.batch; ++b) {
    im2col_t<T>(px + b * x_stride, d, colsT.data());
    if (weight.requires_grad()) {
      auto cols = transpose2d<T>(d.ck(), d.patches(), colsT.data());  // (P, CK)
      gemm_nn<T>(d.cout, d.patches(), d.ck(), gy + b * o_stride, cols.data(),
                 weight.grad_data<T>(), true);
    }
    if (x.requires_grad()) {
      gemm_nn<T>(d.ck(), d.cout, d.patches(), wt.data(), gy + b * o_stride, dcolsT.data(), false);
      col2im_t<T>(dcolsT.data(), d, x.grad_data<T>() + b * x_stride);
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, std::array<int, 3> stride) {
  if (weight.ndim() != 5) {
    throw ShapeError("conv3d weight must be rank 5, got " + shape_str(weight.shape()));
  }
  bool batched;
  if (x.ndim() == 5) {
    batched = true;
  } else if (x.ndim() == 4) {
    batched = false;
  } else {
    throw ShapeError("conv3d input must be rank 4 or 5, got " + shape_str(x.shape()));
  }
  if (x.dtype() != weight.dtype()) throw ContractError("conv3d dtype mismatch");
  Conv3dDims d = conv3d_dims(x, weight, stride, batched);
  Shape os = batched ? Shape{d.batch, d.cout, d.to, d.ho, d.wo} : Shape{d.cout, d.to, d.ho, d.wo};
  Tensor out = Tensor::empty(os, x.dtype());
  if (x.dtype() == DType::F32) {
    conv3d_forward<float>(x, weight, out, d);
  } else {
    conv3d_forward<double>(x, weight, out, d);
  }
  if (detail::wants_grad({&x, &weight})) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = weight, oc = out;
    Tape::active()->record([xc, wc, oc, d]() mutable {
      if (!oc.has_grad()) return;
      if (oc.dtype() == DType::F32) {
        conv3d_backward<float>(xc, wc, oc, d);
      } else {
        conv3d_backward<double>(xc, wc, oc, d);
      }
    });
  }
  return out;
}

namespace {

template <typename T>
void dwconv_forward(const T* x, const T* w, T* y, i64 batch, i64 d_ch, i64 len, i64 k) {
  for (i64 b = 0; b < batch; ++b) {
    for (i64 d = 0; d < d_ch; ++d) {
      const T* xr = x + (b * d_ch + d) * len;
      const T* wr = w + d * k;
      T* yr = y + (b * d_ch + d) * len;
      for (i64 l = 0; l < len; ++l) {
        T acc = 0;
        i64 jmax = std::min<i64>(k - 1, l);
        for (i64 j = 0; j <= jmax; ++j) acc += wr[j] * xr[l - j];
        yr[l] = acc;
      }
    }
  }
}

template <typename T>
void dwconv_backward(Tensor& x, Tensor& weight, Tensor& out, i64 batch, i64 d_ch, i64 len, i64 k) {
  const T* gy = out.grad_data<T>();
  const T* px = x.data<T>();
  const T* pw = weight.data<T>();
  if (weight.requires_grad()) {
    T* gw = weight.grad_data<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 d = 0; d < d_ch; ++d) {
        const T* xr = px + (b * d_ch + d) * len;
        const T* gr = gy + (b * d_ch + d) * len;
        T* gwr = gw + d * k;
        for (i64 j = 0; j < k; ++j) {
          T acc = 0;
          for (i64 l = j; l < len; ++l) acc += gr[l] * xr[l - j];
          gwr[j] += acc;
        }
      }
    }
  }
  if (x.requires_grad()) {
    T* gx = x.grad_data<T>();
    for (i64 b = 0; b < batch; ++b) {
      for (i64 d = 0; d < d_ch; ++d) {
        const T* gr = gy + (b * d_ch + d) * len;
        const T* wr = pw + d * k;
        T* gxr = gx + (b * d_ch + d) * len;
        for (i64 l = 0; l < len; ++l) {
          T acc = 0;
          i64 jmax = std::min<i64>(k - 1, len - 1 - l);
          for (i64 j = 0; j <= jmax; ++j) acc += wr[j] * gr[l + j];
          gxr[l] += acc;
        }
      }
    }
  }
}

}  // namespace

Tensor conv1d_depthwise(const Tensor& x, const Tensor& weight) {
  if (weight.ndim() != 2) {
    throw ShapeError("conv1d_depthwise weight must be (D, k), got " + shape_str(weight.shape()));
  }
  i64 k = weight.dim(1);
  if (k < 1) throw ConfigError("conv1d_depthwise needs k >= 1");
  bool batched;
  if (x.ndim() == 3) {
    batched = true;
  } else if (x.ndim() == 2) {
    batched = false;
  } else {
    throw ShapeError("conv1d_depthwise input must be (D, L) or (B, D, L), got " +
                     shape_str(x.shape()));
  }
  i64 batch = batched ? x.dim(0) : 1;
  i64 d_ch = x.dim(batched ? 1 : 0);
  i64 len = x.dim(batched ? 2 : 1);
  if (weight.dim(0) != d_ch) {
    throw ShapeError("conv1d_depthwise channel mismatch: " + shape_str(x.shape()) + " vs " +
                     shape_str(weight.shape()));
  }
  if (x.dtype() != weight.dtype()) throw ContractError("conv1d_depthwise dtype mismatch");
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  if (x.dtype() == DType::F32) {
    dwconv_forward<float>(x.data<float>(), weight.data<float>(), out.data<float>(), batch, d_ch,
                          len, k);
  } else {
    dwconv_forward<double>(x.data<double>(), weight.data<double>(), out.data<double>(), batch,
                           d_ch, len, k);
  }
  if (detail::wants_grad({&x, &weight})) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = weight, oc = out;
    Tape::active()->record([xc, wc, oc, batch, d_ch, len, k]() mutable {
      if (!oc.has_grad()) return;
      if (oc.dtype() == DType::F32) {
        dwconv_backward<float>(xc, wc, oc, batch, d_ch, len, k);
      } else {
        dwconv_backward<double>(xc, wc, oc, batch, d_ch, len, k);
      }
    });
  }
  return out;
}

}  // namespace spikmamba
