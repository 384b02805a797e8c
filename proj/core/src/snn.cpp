#include "spikmamba/snn.hpp"

#include <cmath>
#include <cstring>

#include "kernel_utils.hpp"
#include "spikmamba/diagnostics.hpp"

namespace spikmamba {

namespace diag {
ForwardProbe& probe() {
  thread_local ForwardProbe p;
  return p;
}
}  // namespace diag

using detail::i64;

LifState LifState::initial(const Shape& shape, DType dt, const LifConfig& cfg) {
  return LifState{Tensor::full(shape, cfg.v_reset, dt)};
}

namespace {

template <typename T>
void lif_step_kernel(const T* x, const T* v_prev, T* s, T* v_new, i64 n, const LifConfig& cfg) {
  T inv_tau = static_cast<T>(1.0 / cfg.tau);
  T v_th = static_cast<T>(cfg.v_th);
  T v_reset = static_cast<T>(cfg.v_reset);
  for (i64 i = 0; i < n; ++i) {
    T h = v_prev[i] + inv_tau * (x[i] - (v_prev[i] - v_reset));
    bool fired = h >= v_th;
    s[i] = fired ? T(1) : T(0);
    v_new[i] = fired ? v_reset : h;
  }
}

}  // namespace

std::pair<SpikeTensor, LifState> lif_step(const Tensor& x_t, const LifState& state,
                                          const LifConfig& cfg) {
  cfg.validate();
  if (x_t.shape() != state.v.shape()) {
    throw ShapeError("lif_step input " + shape_str(x_t.shape()) + " vs state " +
                     shape_str(state.v.shape()));
  }
  Tensor s = Tensor::empty(x_t.shape(), x_t.dtype());
  Tensor v = Tensor::empty(x_t.shape(), x_t.dtype());
  i64 n = x_t.numel();
  if (x_t.dtype() == DType::F32) {
    lif_step_kernel<float>(x_t.data<float>(), state.v.data<float>(), s.data<float>(),
                           v.data<float>(), n, cfg);
  } else {
    lif_step_kernel<double>(x_t.data<double>(), state.v.data<double>(), s.data<double>(),
                            v.data<double>(), n, cfg);
  }
  return {SpikeTensor{s}, LifState{v}};
}

namespace {

// Recurrence over axis 1 of x viewed as (batch, steps, inner). Membrane
// inputs H are kept for the surrogate backward.
template <typename T>
struct LifSaved {
  std::vector<T> h;
};

template <typename T>
void lif_unroll_forward(const Tensor& x, Tensor& s_out, const LifConfig& cfg, i64 batch,
                        i64 steps, i64 inner, std::vector<T>& h_hist, bool relaxed) {
  const T* px = x.data<T>();
  T* ps = s_out.data<T>();
  h_hist.resize(static_cast<std::size_t>(x.numel()));
  std::vector<T> v(static_cast<std::size_t>(inner));
  T inv_tau = static_cast<T>(1.0 / cfg.tau);
  T v_th = static_cast<T>(cfg.v_th);
  T v_reset = static_cast<T>(cfg.v_reset);
  T inv_a = static_cast<T>(1.0 / cfg.surrogate_width);
  for (i64 b = 0; b < batch; ++b) {
    std::fill(v.begin(), v.end(), v_reset);
    for (i64 t = 0; t < steps; ++t) {
      i64 off = (b * steps + t) * inner;
      const T* xt = px + off;
      T* st = ps + off;
      T* ht = h_hist.data() + off;
      T* vp = v.data();
      if (relaxed) {
        for (i64 i = 0; i < inner; ++i) {
          T h = vp[i] + inv_tau * (xt[i] - (vp[i] - v_reset));
          ht[i] = h;
          T u = (h - v_th) * inv_a + T(0.5);
          T spike = u < T(0) ? T(0) : (u > T(1) ? T(1) : u);
          st[i] = spike;
          vp[i] = h * (T(1) - spike) + v_reset * spike;
        }
      } else {
        for (i64 i = 0; i < inner; ++i) {
          T h = vp[i] + inv_tau * (xt[i] - (vp[i] - v_reset));
          ht[i] = h;
          bool fired = h >= v_th;
          st[i] = fired ? T(1) : T(0);
          vp[i] = fired ? v_reset : h;
        }
      }
    }
  }
}

// Hard mode: dH[t] = gS[t] * surr(H[t]) + dV[t] * (1 - S[t]); the reset term
// is detached. Relaxed mode adds the exact reset-path term
// dV[t] * (v_reset - H[t]) * surr(H[t]).
template <typename T>
void lif_unroll_backward(Tensor& x, Tensor& s_out, const LifConfig& cfg, i64 batch, i64 steps,
                         i64 inner, const std::vector<T>& h_hist, bool relaxed) {
  const T* gs = s_out.grad_data<T>();
  const T* ps = s_out.data<T>();
  T* gx = x.grad_data<T>();
  T inv_tau = static_cast<T>(1.0 / cfg.tau);
  T leak = T(1) - inv_tau;
  T v_th = static_cast<T>(cfg.v_th);
  T v_reset = static_cast<T>(cfg.v_reset);
  T inv_a = static_cast<T>(1.0 / cfg.surrogate_width);
  T half_a = static_cast<T>(cfg.surrogate_width / 2.0);
  std::vector<T> dv(static_cast<std::size_t>(inner));
  for (i64 b = 0; b < batch; ++b) {
    std::fill(dv.begin(), dv.end(), T(0));
    for (i64 t = steps - 1; t >= 0; --t) {
      i64 off = (b * steps + t) * inner;
      const T* ht = h_hist.data() + off;
      const T* gst = gs + off;
      const T* st = ps + off;
      T* gxt = gx + off;
      T* dvp = dv.data();
      for (i64 i = 0; i < inner; ++i) {
        T h = ht[i];
        T centered = h - v_th;
        T surr = (centered > -half_a && centered < half_a) ? inv_a : T(0);
        T dh = gst[i] * surr;
        if (relaxed) {
          dh += dvp[i] * ((T(1) - st[i]) + (v_reset - h) * surr);
        } else {
          dh += dvp[i] * (T(1) - st[i]);
        }
        gxt[i] += dh * inv_tau;
        dvp[i] = dh * leak;
      }
    }
  }
}

template <typename T>
void record_window_margins(const std::vector<T>& h_hist, const LifConfig& cfg) {
  auto& p = diag::probe();
  double v_th = cfg.v_th;
  double half_a = cfg.surrogate_width / 2.0;
  double best = p.min_window_margin;
  p.branch_trace.reserve(p.branch_trace.size() + h_hist.size());
  for (T h : h_hist) {
    double centered = static_cast<double>(h) - v_th;
    double margin = std::fabs(std::fabs(centered) - half_a);
    if (margin < best) best = margin;
    std::uint8_t state = centered <= -half_a ? 0 : (centered >= half_a ? 2 : 1);
    p.branch_trace.push_back(state);
  }
  p.min_window_margin = best;
}

Tensor lif_unroll(const Tensor& x, const LifConfig& cfg, i64 batch, i64 steps, i64 inner,
                  bool relaxed) {
  cfg.validate();
  if (steps < 1) throw ContractError("lif_sequence needs a non-empty time axis");
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  if (x.dtype() == DType::F32) {
    auto saved = std::make_shared<LifSaved<float>>();
    lif_unroll_forward<float>(x, out, cfg, batch, steps, inner, saved->h, relaxed);
    if (diag::probe().enabled) record_window_margins<float>(saved->h, cfg);
    if (detail::wants_grad({&x})) {
      out.set_requires_grad(true);
      Tensor xc = x, oc = out;
      Tape::active()->record([xc, oc, cfg, batch, steps, inner, saved, relaxed]() mutable {
        if (!oc.has_grad()) return;
        lif_unroll_backward<float>(xc, oc, cfg, batch, steps, inner, saved->h, relaxed);
      });
    }
  } else {
    auto saved = std::make_shared<LifSaved<double>>();
    lif_unroll_forward<double>(x, out, cfg, batch, steps, inner, saved->h, relaxed);
    if (diag::probe().enabled) record_window_margins<double>(saved->h, cfg);
    if (detail::wants_grad({&x})) {
      out.set_requires_grad(true);
      Tensor xc = x, oc = out;
      Tape::active()->record([xc, oc, cfg, batch, steps, inner, saved, relaxed]() mutable {
        if (!oc.has_grad()) return;
        lif_unroll_backward<double>(xc, oc, cfg, batch, steps, inner, saved->h, relaxed);
      });
    }
  }
  return out;
}

}  // namespace

SpikeTensor lif_sequence(const Tensor& x, const LifConfig& cfg) {
  if (x.ndim() < 1) throw ContractError("lif_sequence needs a time axis");
  i64 steps = x.dim(0);
  return SpikeTensor{lif_unroll(x, cfg, 1, steps, steps ? x.numel() / steps : 0, false)};
}

Tensor lif_sequence_relaxed(const Tensor& x, const LifConfig& cfg) {
  if (x.ndim() < 1) throw ContractError("lif_sequence needs a time axis");
  i64 steps = x.dim(0);
  return lif_unroll(x, cfg, 1, steps, steps ? x.numel() / steps : 0, true);
}

Tensor lif_over_time_axis1(const Tensor& x, const LifConfig& cfg, bool relaxed) {
  if (x.ndim() < 2) throw ShapeError("lif_over_time_axis1 expects (B, T, ...)");
  i64 batch = x.dim(0), steps = x.dim(1);
  return lif_unroll(x, cfg, batch, steps, x.numel() / (batch * steps), relaxed);
}

Tensor heaviside_surrogate_backward(const Tensor& h_minus_vth, const Tensor& upstream,
                                    const LifConfig& cfg) {
  cfg.validate();
  if (h_minus_vth.shape() != upstream.shape()) {
    throw ShapeError("surrogate shapes disagree: " + shape_str(h_minus_vth.shape()) + " vs " +
                     shape_str(upstream.shape()));
  }
  Tensor out = Tensor::empty(h_minus_vth.shape(), h_minus_vth.dtype());
  i64 n = out.numel();
  double inv_a = 1.0 / cfg.surrogate_width;
  double half_a = cfg.surrogate_width / 2.0;
  if (out.dtype() == DType::F32) {
    const float* hp = h_minus_vth.data<float>();
    const float* up = upstream.data<float>();
    float* po = out.data<float>();
    for (i64 i = 0; i < n; ++i) {
      po[i] = (hp[i] > -half_a && hp[i] < half_a) ? static_cast<float>(up[i] * inv_a) : 0.0f;
    }
  } else {
    const double* hp = h_minus_vth.data<double>();
    const double* up = upstream.data<double>();
    double* po = out.data<double>();
    for (i64 i = 0; i < n; ++i) {
      po[i] = (hp[i] > -half_a && hp[i] < half_a) ? up[i] * inv_a : 0.0;
    }
  }
  return out;
}

}  // namespace spikmamba
