#include <cmath>
#include <cstring>

#include "kernel_utils.hpp"
#include "spikmamba/diagnostics.hpp"
#include "spikmamba/ops.hpp"

namespace spikmamba {

using detail::i64;

BatchNormState BatchNormState::make(std::int64_t channels, DType dt) {
  BatchNormState st;
  st.gamma = Tensor::full({channels}, 1.0, dt).set_requires_grad(true);
  st.beta = Tensor::zeros({channels}, dt).set_requires_grad(true);
  st.running_mean = Tensor::zeros({channels}, dt);
  st.running_var = Tensor::full({channels}, 1.0, dt);
  return st;
}

namespace {

struct BnDims {
  i64 batch, channels, inner;  // x viewed as (B, C, inner)
};

template <typename T>
struct BnSaved {
  std::vector<T> xhat;     // (B, C, inner), train mode only
  std::vector<T> inv_std;  // (C,)
};

template <typename T>
void bn_forward(const Tensor& x, BatchNormState& st, bool training, Tensor& out, BnDims dm,
                std::shared_ptr<BnSaved<T>> saved) {
  const T* px = x.data<T>();
  T* po = out.data<T>();
  const T* gamma = st.gamma.data<T>();
  const T* beta = st.beta.data<T>();
  T* rmean = st.running_mean.data<T>();
  T* rvar = st.running_var.data<T>();
  i64 group = dm.batch * dm.inner;  // elements normalized per channel
  saved->inv_std.resize(static_cast<std::size_t>(dm.channels));
  if (training) saved->xhat.resize(static_cast<std::size_t>(x.numel()));

  for (i64 c = 0; c < dm.channels; ++c) {
    double mean, var;
    if (training) {
      double sum = 0;
      for (i64 b = 0; b < dm.batch; ++b) {
        const T* row = px + (b * dm.channels + c) * dm.inner;
        for (i64 i = 0; i < dm.inner; ++i) sum += row[i];
      }
      mean = sum / static_cast<double>(group);
      double sq = 0;
      for (i64 b = 0; b < dm.batch; ++b) {
        const T* row = px + (b * dm.channels + c) * dm.inner;
        for (i64 i = 0; i < dm.inner; ++i) {
          double d = row[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(group);
      if (diag::probe().enabled && var < diag::probe().min_bn_variance) {
        diag::probe().min_bn_variance = var;
      }
      rmean[c] = static_cast<T>((1.0 - st.momentum) * rmean[c] + st.momentum * mean);
      rvar[c] = static_cast<T>((1.0 - st.momentum) * rvar[c] + st.momentum * var);
    } else {
      mean = rmean[c];
      var = rvar[c];
    }
    double inv_std = 1.0 / std::sqrt(var + st.eps);
    saved->inv_std[static_cast<std::size_t>(c)] = static_cast<T>(inv_std);
    T g = gamma[c], bt = beta[c];
    for (i64 b = 0; b < dm.batch; ++b) {
      const T* row = px + (b * dm.channels + c) * dm.inner;
      T* orow = po + (b * dm.channels + c) * dm.inner;
      T* hrow = training ? saved->xhat.data() + (b * dm.channels + c) * dm.inner : nullptr;
      for (i64 i = 0; i < dm.inner; ++i) {
        T xh = static_cast<T>((row[i] - mean) * inv_std);
        if (training) hrow[i] = xh;
        orow[i] = g * xh + bt;
      }
    }
  }
}

template <typename T>
void bn_backward(Tensor& x, BatchNormState st, Tensor& out, BnDims dm, bool training,
                 std::shared_ptr<BnSaved<T>> saved) {
  const T* gy = out.grad_data<T>();
  const T* gamma = st.gamma.data<T>();
  i64 group = dm.batch * dm.inner;

  for (i64 c = 0; c < dm.channels; ++c) {
    double inv_std = saved->inv_std[static_cast<std::size_t>(c)];
    double sum_gy = 0, sum_gy_xh = 0;
    if (training || st.gamma.requires_grad() || st.beta.requires_grad()) {
      for (i64 b = 0; b < dm.batch; ++b) {
        i64 base = (b * dm.channels + c) * dm.inner;
        const T* grow = gy + base;
        for (i64 i = 0; i < dm.inner; ++i) {
          sum_gy += grow[i];
          if (training) sum_gy_xh += grow[i] * saved->xhat[static_cast<std::size_t>(base + i)];
        }
      }
    }
    if (st.beta.requires_grad()) st.beta.grad_data<T>()[c] += static_cast<T>(sum_gy);
    if (st.gamma.requires_grad() && training) {
      st.gamma.grad_data<T>()[c] += static_cast<T>(sum_gy_xh);
    }
    if (!training && st.gamma.requires_grad()) {
      // eval: xhat derived from running stats on the fly
      double acc = 0;
      double rm = st.running_mean.at(c);
      for (i64 b = 0; b < dm.batch; ++b) {
        i64 base = (b * dm.channels + c) * dm.inner;
        const T* grow = gy + base;
        const T* row = x.data<T>() + base;
        for (i64 i = 0; i < dm.inner; ++i) acc += grow[i] * (row[i] - rm) * inv_std;
      }
      st.gamma.grad_data<T>()[c] += static_cast<T>(acc);
    }
    if (x.requires_grad()) {
      T* gx = x.grad_data<T>();
      double g = gamma[c];
      if (training) {
        double mean_gy = sum_gy / static_cast<double>(group);
        double mean_gy_xh = sum_gy_xh / static_cast<double>(group);
        for (i64 b = 0; b < dm.batch; ++b) {
          i64 base = (b * dm.channels + c) * dm.inner;
          const T* grow = gy + base;
          T* gxrow = gx + base;
          for (i64 i = 0; i < dm.inner; ++i) {
            double xh = saved->xhat[static_cast<std::size_t>(base + i)];
            gxrow[i] += static_cast<T>(g * inv_std * (grow[i] - mean_gy - xh * mean_gy_xh));
          }
        }
      } else {
        double k = g * inv_std;
        for (i64 b = 0; b < dm.batch; ++b) {
          i64 base = (b * dm.channels + c) * dm.inner;
          const T* grow = gy + base;
          T* gxrow = gx + base;
          for (i64 i = 0; i < dm.inner; ++i) gxrow[i] += static_cast<T>(k * grow[i]);
        }
      }
    }
  }
}

}  // namespace

Tensor batchnorm(const Tensor& x, BatchNormState& state, bool training) {
  if (x.ndim() < 2) throw ShapeError("batchnorm input must be (B, C, ...), got " + shape_str(x.shape()));
  i64 channels = x.dim(1);
  if (state.gamma.dim(0) != channels) {
    throw ShapeError("batchnorm channel mismatch: input " + shape_str(x.shape()) + " vs state width " +
                     std::to_string(state.gamma.dim(0)));
  }
  if (x.dtype() != state.gamma.dtype()) throw ContractError("batchnorm dtype mismatch");
  BnDims dm{x.dim(0), channels, 1};
  for (int d = 2; d < x.ndim(); ++d) dm.inner *= x.dim(d);

  Tensor out = Tensor::empty(x.shape(), x.dtype());
  bool rec = detail::wants_grad({&x, &state.gamma, &state.beta});
  if (x.dtype() == DType::F32) {
    auto saved = std::make_shared<BnSaved<float>>();
    bn_forward<float>(x, state, training, out, dm, saved);
    if (rec) {
      out.set_requires_grad(true);
      Tensor xc = x, oc = out;
      BatchNormState stc = state;
      Tape::active()->record([xc, stc, oc, dm, training, saved]() mutable {
        if (!oc.has_grad()) return;
        bn_backward<float>(xc, stc, oc, dm, training, saved);
      });
    }
  } else {
    auto saved = std::make_shared<BnSaved<double>>();
    bn_forward<double>(x, state, training, out, dm, saved);
    if (rec) {
      out.set_requires_grad(true);
      Tensor xc = x, oc = out;
      BatchNormState stc = state;
      Tape::active()->record([xc, stc, oc, dm, training, saved]() mutable {
        if (!oc.has_grad()) return;
        bn_backward<double>(xc, stc, oc, dm, training, saved);
      });
    }
  }
  return out;
}

}  // namespace spikmamba
