#include <cmath>
#include <cstring>

#include "kernel_utils.hpp"
#include "spikmamba/model.hpp"

namespace spikmamba {

using detail::i64;

namespace {

constexpr double kZohSeriesGuard = 1e-6;  // |delta*A| below this -> series branch
// The exact dB/dA form cancels catastrophically near zero; switch to the
// series earlier than the forward guard.
constexpr double kZohGradGuard = 1e-3;

// ZOH scalar pieces, evaluated in the tensor's own precision so the f32
// training path vectorizes.
template <typename T>
inline void zoh_point(T dv, T av, T& a_bar, T& b_scale) {
  T x = dv * av;
  a_bar = std::exp(x);
  if (std::fabs(x) < static_cast<T>(kZohSeriesGuard)) {
    b_scale = dv * (T(1) + x / T(2) + x * x / T(6));  // -> delta as x -> 0
  } else {
    b_scale = std::expm1(x) / av;
  }
}

template <typename T>
void zoh_forward(const Tensor& a, const Tensor& delta, Tensor& a_bar, Tensor& b_scale) {
  i64 d_inner = a.dim(0), d_state = a.dim(1);
  i64 rows = delta.numel() / d_inner;  // B*L
  const T* pa = a.data<T>();
  const T* pd = delta.data<T>();
  T* pab = a_bar.data<T>();
  T* pbs = b_scale.data<T>();
  for (i64 r = 0; r < rows; ++r) {
    const T* drow = pd + r * d_inner;
    T* ab_row = pab + r * d_inner * d_state;
    T* bs_row = pbs + r * d_inner * d_state;
    for (i64 d = 0; d < d_inner; ++d) {
      T dv = drow[d];
      for (i64 n = 0; n < d_state; ++n) {
        zoh_point<T>(dv, pa[d * d_state + n], ab_row[d * d_state + n], bs_row[d * d_state + n]);
      }
    }
  }
}

template <typename T>
void zoh_backward(Tensor& a, Tensor& delta, Tensor& a_bar, Tensor& b_scale) {
  i64 d_inner = a.dim(0), d_state = a.dim(1);
  i64 rows = delta.numel() / d_inner;
  const T* pa = a.data<T>();
  const T* pd = delta.data<T>();
  const T* pab = a_bar.data<T>();
  const T* gab = a_bar.has_grad() ? a_bar.grad_data<T>() : nullptr;
  const T* gbs = b_scale.has_grad() ? b_scale.grad_data<T>() : nullptr;
  if (!gab && !gbs) return;
  T* gd = delta.requires_grad() ? delta.grad_data<T>() : nullptr;
  T* ga = a.requires_grad() ? a.grad_data<T>() : nullptr;
  for (i64 r = 0; r < rows; ++r) {
    const T* drow = pd + r * d_inner;
    const T* ab_row = pab + r * d_inner * d_state;
    const T* gab_row = gab ? gab + r * d_inner * d_state : nullptr;
    const T* gbs_row = gbs ? gbs + r * d_inner * d_state : nullptr;
    for (i64 d = 0; d < d_inner; ++d) {
      double dv = drow[d];
      double gd_acc = 0;
      for (i64 n = 0; n < d_state; ++n) {
        double av = pa[d * d_state + n];
        double eab = ab_row[d * d_state + n];
        double g_ab = gab_row ? static_cast<double>(gab_row[d * d_state + n]) : 0.0;
        double g_bs = gbs_row ? static_cast<double>(gbs_row[d * d_state + n]) : 0.0;
        // dA_bar/ddelta = A * exp(x); dA_bar/dA = delta * exp(x)
        // dB_scale/ddelta = exp(x) in both branches
        gd_acc += g_ab * eab * av + g_bs * eab;
        if (ga) {
          double x = dv * av;
          double dbs_da;
          if (std::fabs(x) < kZohGradGuard) {
            dbs_da = dv * dv * (0.5 + x / 3.0 + x * x / 8.0);
          } else {
            dbs_da = (dv * eab * av - eab + 1.0) / (av * av);
          }
          ga[d * d_state + n] += static_cast<T>(g_ab * eab * dv + g_bs * dbs_da);
        }
      }
      if (gd) gd[r * d_inner + d] += static_cast<T>(gd_acc);
    }
  }
}

}  // namespace

std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a, const Tensor& delta) {
  if (a.ndim() != 2) throw ShapeError("zoh_discretize expects A as (d_inner, d_state)");
  if (delta.ndim() < 1 || delta.dim(delta.ndim() - 1) != a.dim(0)) {
    throw ShapeError("zoh_discretize: delta " + shape_str(delta.shape()) +
                     " trailing dim must equal d_inner " + std::to_string(a.dim(0)));
  }
  if (a.dtype() != delta.dtype()) throw ContractError("zoh_discretize dtype mismatch");
  for (i64 i = 0; i < a.numel(); ++i) {
    if (a.at(i) >= 0.0) {
      throw StabilityError("SSM evolution matrix must be strictly negative, got A[" +
                           std::to_string(i) + "] = " + std::to_string(a.at(i)));
    }
  }
  Shape os = delta.shape();
  os.push_back(a.dim(1));
  Tensor a_bar = Tensor::empty(os, a.dtype());
  Tensor b_scale = Tensor::empty(os, a.dtype());
  if (a.dtype() == DType::F32) {
    zoh_forward<float>(a, delta, a_bar, b_scale);
  } else {
    zoh_forward<double>(a, delta, a_bar, b_scale);
  }
  if (detail::wants_grad({&a, &delta})) {
    a_bar.set_requires_grad(true);
    b_scale.set_requires_grad(true);
    Tensor ac = a, dc = delta, abc = a_bar, bsc = b_scale;
    Tape::active()->record([ac, dc, abc, bsc]() mutable {
      if (!abc.has_grad() && !bsc.has_grad()) return;
      if (ac.dtype() == DType::F32) {
        zoh_backward<float>(ac, dc, abc, bsc);
      } else {
        zoh_backward<double>(ac, dc, abc, bsc);
      }
    });
  }
  return {a_bar, b_scale};
}

namespace {

template <typename T>
struct ScanSaved {
  std::vector<T> z;  // (B, L, D, N) state history
};

template <typename T>
void scan_forward(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar, const Tensor& c,
                  Tensor& y, ScanSaved<T>& saved) {
  i64 b = u.dim(0), l = u.dim(1), d = u.dim(2), n = a_bar.dim(3);
  saved.z.assign(static_cast<std::size_t>(b * l * d * n), T(0));
  const T* pu = u.data<T>();
  const T* pab = a_bar.data<T>();
  const T* pbb = b_bar.data<T>();
  const T* pc = c.data<T>();
  T* py = y.data<T>();
  for (i64 bi = 0; bi < b; ++bi) {
    const T* z_prev = nullptr;  // zero state before t=0
    for (i64 t = 0; t < l; ++t) {
      i64 step = (bi * l + t);
      const T* ab = pab + step * d * n;
      const T* bb = pbb + step * d * n;
      const T* ut = pu + step * d;
      const T* ct = pc + step * n;
      T* zt = saved.z.data() + step * d * n;
      T* yt = py + step * d;
      for (i64 di = 0; di < d; ++di) {
        T uv = ut[di];
        const T* abd = ab + di * n;
        const T* bbd = bb + di * n;
        const T* zp = z_prev ? z_prev + di * n : nullptr;
        T* zd = zt + di * n;
        T acc = 0;
        for (i64 ni = 0; ni < n; ++ni) {
          T zv = (zp ? abd[ni] * zp[ni] : T(0)) + bbd[ni] * uv;
          zd[ni] = zv;
          acc += ct[ni] * zv;
        }
        yt[di] = acc;
      }
      z_prev = zt;
    }
  }
}

template <typename T>
void scan_backward(Tensor& u, Tensor& a_bar, Tensor& b_bar, Tensor& c, Tensor& y,
                   const ScanSaved<T>& saved) {
  i64 b = u.dim(0), l = u.dim(1), d = u.dim(2), n = a_bar.dim(3);
  const T* gy = y.grad_data<T>();
  const T* pu = u.data<T>();
  const T* pab = a_bar.data<T>();
  const T* pbb = b_bar.data<T>();
  const T* pc = c.data<T>();
  T* gu = u.requires_grad() ? u.grad_data<T>() : nullptr;
  T* gab = a_bar.requires_grad() ? a_bar.grad_data<T>() : nullptr;
  T* gbb = b_bar.requires_grad() ? b_bar.grad_data<T>() : nullptr;
  T* gc = c.requires_grad() ? c.grad_data<T>() : nullptr;
  std::vector<T> dz(static_cast<std::size_t>(d * n));
  for (i64 bi = 0; bi < b; ++bi) {
    std::memset(dz.data(), 0, dz.size() * sizeof(T));
    for (i64 t = l - 1; t >= 0; --t) {
      i64 step = (bi * l + t);
      const T* ab = pab + step * d * n;
      const T* bb = pbb + step * d * n;
      const T* ut = pu + step * d;
      const T* ct = pc + step * n;
      const T* zt = saved.z.data() + step * d * n;
      const T* z_prev = t > 0 ? saved.z.data() + (step - 1) * d * n : nullptr;
      const T* gyt = gy + step * d;
      for (i64 di = 0; di < d; ++di) {
        T gyv = gyt[di];
        T uv = ut[di];
        const T* abd = ab + di * n;
        const T* bbd = bb + di * n;
        const T* ztd = zt + di * n;
        const T* zpd = z_prev ? z_prev + di * n : nullptr;
        T* dzd = dz.data() + di * n;
        T gu_acc = 0;
        for (i64 ni = 0; ni < n; ++ni) {
          // state grad: carried + direct through y[t,d] = sum_n c[t,n] z
          T dzv = dzd[ni] + gyv * ct[ni];
          if (gab) gab[step * d * n + di * n + ni] += dzv * (zpd ? zpd[ni] : T(0));
          if (gbb) gbb[step * d * n + di * n + ni] += dzv * uv;
          gu_acc += dzv * bbd[ni];
          if (gc) gc[step * n + ni] += gyv * ztd[ni];
          dzd[ni] = dzv * abd[ni];  // carry to t-1
        }
        if (gu) gu[step * d + di] += gu_acc;
      }
    }
  }
}

}  // namespace

Tensor selective_scan(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar, const Tensor& c) {
  if (u.ndim() != 3 || a_bar.ndim() != 4 || b_bar.ndim() != 4 || c.ndim() != 3) {
    throw ShapeError("selective_scan expects u(B,L,D), A_bar/B_bar(B,L,D,N), C(B,L,N)");
  }
  i64 b = u.dim(0), l = u.dim(1), d = u.dim(2);
  i64 n = a_bar.dim(3);
  if (a_bar.dim(0) != b || a_bar.dim(1) != l || a_bar.dim(2) != d || b_bar.shape() != a_bar.shape() ||
      c.dim(0) != b || c.dim(1) != l || c.dim(2) != n) {
    throw ShapeError("selective_scan operand shapes disagree: u " + shape_str(u.shape()) +
                     ", A_bar " + shape_str(a_bar.shape()) + ", B_bar " +
                     shape_str(b_bar.shape()) + ", C " + shape_str(c.shape()));
  }
  Tensor y = Tensor::empty({b, l, d}, u.dtype());
  if (u.dtype() == DType::F32) {
    auto saved = std::make_shared<ScanSaved<float>>();
    scan_forward<float>(u, a_bar, b_bar, c, y, *saved);
    if (detail::wants_grad({&u, &a_bar, &b_bar, &c})) {
      y.set_requires_grad(true);
      Tensor uc = u, abc = a_bar, bbc = b_bar, cc = c, yc = y;
      Tape::active()->record([uc, abc, bbc, cc, yc, saved]() mutable {
        if (!yc.has_grad()) return;
        scan_backward<float>(uc, abc, bbc, cc, yc, *saved);
      });
    }
  } else {
    auto saved = std::make_shared<ScanSaved<double>>();
    scan_forward<double>(u, a_bar, b_bar, c, y, *saved);
    if (detail::wants_grad({&u, &a_bar, &b_bar, &c})) {
      y.set_requires_grad(true);
      Tensor uc = u, abc = a_bar, bbc = b_bar, cc = c, yc = y;
      Tape::active()->record([uc, abc, bbc, cc, yc, saved]() mutable {
        if (!yc.has_grad()) return;
        scan_backward<double>(uc, abc, bbc, cc, yc, *saved);
      });
    }
  }
  return y;
}


namespace {

// f32 fast path: exp(x)-based b_scale with a short series where the
// subtraction would cancel. Training-precision only; the f64 route keeps the
// exact expm1 form the public op uses.
inline void zoh_point_fast(float dv, float av, float& a_bar, float& b_scale) {
  float x = dv * av;
  a_bar = std::exp(x);
  if (std::fabs(x) < 0.25f) {
    b_scale =
        dv * (1.0f + x * (0.5f + x * (1.0f / 6.0f + x * (1.0f / 24.0f + x * (1.0f / 120.0f)))));
  } else {
    b_scale = (a_bar - 1.0f) / av;
  }
}

inline void zoh_point_fast(double dv, double av, double& a_bar, double& b_scale) {
  zoh_point<double>(dv, av, a_bar, b_scale);
}

// Fused ZOH + scan: keeps the state history plus the per-element
// discretization so the backward pass is free of libm calls.
template <typename T>
struct FusedSaved {
  std::vector<T> z;        // (B, L, D, N)
  std::vector<T> a_bar;    // (B, L, D, N)
  std::vector<T> b_scale;  // (B, L, D, N)
};

template <typename T>
void fused_forward(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b_proj,
                   const Tensor& c, Tensor& y, FusedSaved<T>& saved) {
  i64 b = u.dim(0), l = u.dim(1), d = u.dim(2), n = a.dim(1);
  saved.z.resize(static_cast<std::size_t>(b * l * d * n));
  saved.a_bar.resize(saved.z.size());
  saved.b_scale.resize(saved.z.size());
  const T* pu = u.data<T>();
  const T* pd = delta.data<T>();
  const T* pa = a.data<T>();
  const T* pb = b_proj.data<T>();
  const T* pc = c.data<T>();
  T* py = y.data<T>();
  for (i64 bi = 0; bi < b; ++bi) {
    const T* z_prev = nullptr;
    for (i64 t = 0; t < l; ++t) {
      i64 step = bi * l + t;
      const T* ut = pu + step * d;
      const T* dt = pd + step * d;
      const T* bt = pb + step * n;
      const T* ct = pc + step * n;
      T* zt = saved.z.data() + step * d * n;
      T* abt = saved.a_bar.data() + step * d * n;
      T* bst = saved.b_scale.data() + step * d * n;
      T* yt = py + step * d;
      for (i64 di = 0; di < d; ++di) {
        T uv = ut[di];
        T dv = dt[di];
        const T* ad = pa + di * n;
        const T* zp = z_prev ? z_prev + di * n : nullptr;
        T* zd = zt + di * n;
        T* abd = abt + di * n;
        T* bsd = bst + di * n;
        T acc = 0;
        for (i64 ni = 0; ni < n; ++ni) {
          T a_bar, b_scale;
          zoh_point_fast(dv, ad[ni], a_bar, b_scale);
          abd[ni] = a_bar;
          bsd[ni] = b_scale;
          T zv = (zp ? a_bar * zp[ni] : T(0)) + b_scale * bt[ni] * uv;
          zd[ni] = zv;
          acc += ct[ni] * zv;
        }
        yt[di] = acc;
      }
      z_prev = zt;
    }
  }
}

template <typename T>
void fused_backward(Tensor& u, Tensor& delta, Tensor& a, Tensor& b_proj, Tensor& c, Tensor& y,
                    const FusedSaved<T>& saved) {
  i64 b = u.dim(0), l = u.dim(1), d = u.dim(2), n = a.dim(1);
  const T* gy = y.grad_data<T>();
  const T* pu = u.data<T>();
  const T* pd = delta.data<T>();
  const T* pa = a.data<T>();
  const T* pb = b_proj.data<T>();
  const T* pc = c.data<T>();
  T* gu = u.requires_grad() ? u.grad_data<T>() : nullptr;
  T* gd = delta.requires_grad() ? delta.grad_data<T>() : nullptr;
  T* ga = a.requires_grad() ? a.grad_data<T>() : nullptr;
  T* gb = b_proj.requires_grad() ? b_proj.grad_data<T>() : nullptr;
  T* gc = c.requires_grad() ? c.grad_data<T>() : nullptr;
  std::vector<T> dz(static_cast<std::size_t>(d * n));
  for (i64 bi = 0; bi < b; ++bi) {
    std::memset(dz.data(), 0, dz.size() * sizeof(T));
    for (i64 t = l - 1; t >= 0; --t) {
      i64 step = bi * l + t;
      const T* ut = pu + step * d;
      const T* dt = pd + step * d;
      const T* bt = pb + step * n;
      const T* ct = pc + step * n;
      const T* zt = saved.z.data() + step * d * n;
      const T* abt = saved.a_bar.data() + step * d * n;
      const T* bst = saved.b_scale.data() + step * d * n;
      const T* z_prev = t > 0 ? saved.z.data() + (step - 1) * d * n : nullptr;
      const T* gyt = gy + step * d;
      for (i64 di = 0; di < d; ++di) {
        T gyv = gyt[di];
        T uv = ut[di];
        T dv = dt[di];
        const T* ad = pa + di * n;
        const T* ztd = zt + di * n;
        const T* abd = abt + di * n;
        const T* bsd = bst + di * n;
        const T* zpd = z_prev ? z_prev + di * n : nullptr;
        T* dzd = dz.data() + di * n;
        T gu_acc = 0;
        T gd_acc = 0;
        for (i64 ni = 0; ni < n; ++ni) {
          T av = ad[ni];
          T a_bar = abd[ni];
          T b_scale = bsd[ni];
          T b_bar = b_scale * bt[ni];
          T dzv = dzd[ni] + gyv * ct[ni];
          T da_bar = dzv * (zpd ? zpd[ni] : T(0));
          T db_bar = dzv * uv;
          gd_acc += da_bar * a_bar * av + db_bar * bt[ni] * a_bar;
          if (ga) {
            T x = dv * av;
            T dbs_da;
            if (std::fabs(x) < static_cast<T>(kZohGradGuard)) {
              dbs_da = dv * dv * (T(0.5) + x / T(3) + x * x / T(8));
            } else {
              dbs_da = (dv * a_bar * av - a_bar + T(1)) / (av * av);
            }
            ga[di * n + ni] += da_bar * a_bar * dv + db_bar * bt[ni] * dbs_da;
          }
          if (gb) gb[step * n + ni] += db_bar * b_scale;
          gu_acc += dzv * b_bar;
          if (gc) gc[step * n + ni] += gyv * ztd[ni];
          dzd[ni] = dzv * a_bar;
        }
        if (gu) gu[step * d + di] += gu_acc;
        if (gd) gd[step * d + di] += gd_acc;
      }
    }
  }
}

}  // namespace

Tensor ssm_zoh_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b_proj,
                    const Tensor& c) {
  if (u.ndim() != 3 || delta.shape() != u.shape() || a.ndim() != 2 || b_proj.ndim() != 3 ||
      c.ndim() != 3) {
    throw ShapeError("ssm_zoh_scan expects u/delta (B,L,D), a (D,N), b/c (B,L,N)");
  }
  i64 b = u.dim(0), l = u.dim(1), d = u.dim(2), n = a.dim(1);
  if (a.dim(0) != d || b_proj.dim(0) != b || b_proj.dim(1) != l || b_proj.dim(2) != n ||
      c.shape() != b_proj.shape()) {
    throw ShapeError("ssm_zoh_scan operand shapes disagree");
  }
  for (i64 i = 0; i < a.numel(); ++i) {
    if (a.at(i) >= 0.0) {
      throw StabilityError("SSM evolution matrix must be strictly negative");
    }
  }
  Tensor y = Tensor::empty({b, l, d}, u.dtype());
  if (u.dtype() == DType::F32) {
    auto saved = std::make_shared<FusedSaved<float>>();
    fused_forward<float>(u, delta, a, b_proj, c, y, *saved);
    if (detail::wants_grad({&u, &delta, &a, &b_proj, &c})) {
      y.set_requires_grad(true);
      Tensor uc = u, dc = delta, ac = a, bc = b_proj, cc = c, yc = y;
      Tape::active()->record([uc, dc, ac, bc, cc, yc, saved]() mutable {
        if (!yc.has_grad()) return;
        fused_backward<float>(uc, dc, ac, bc, cc, yc, *saved);
      });
    }
  } else {
    auto saved = std::make_shared<FusedSaved<double>>();
    fused_forward<double>(u, delta, a, b_proj, c, y, *saved);
    if (detail::wants_grad({&u, &delta, &a, &b_proj, &c})) {
      y.set_requires_grad(true);
      Tensor uc = u, dc = delta, ac = a, bc = b_proj, cc = c, yc = y;
      Tape::active()->record([uc, dc, ac, bc, cc, yc, saved]() mutable {
        if (!yc.has_grad()) return;
        fused_backward<double>(uc, dc, ac, bc, cc, yc, *saved);
      });
    }
  }
  return y;
}

Tensor spik_mamba_forward(const Tensor& p_local, const SpikMambaLayerParams& params,
                          const LifConfig& lif, SpikeMode mode) {
  if (p_local.ndim() != 4) {
    throw ShapeError("spik_mamba_forward expects (B,T,N,D), got " + shape_str(p_local.shape()));
  }
  i64 b = p_local.dim(0), t = p_local.dim(1), n = p_local.dim(2), d = p_local.dim(3);
  i64 l = t * n;  // tokens flattened time-major: all N tokens of frame 0, then frame 1, ...

  auto spike_seq = [&](const Tensor& x) {
    // (B, L, D') -> LIF over the frame axis -> (B, L, D')
    i64 dd = x.dim(2);
    return spike_layer(x.reshape({b, t, n, dd}), lif, mode).reshape({b, l, dd});
  };

  Tensor seq = p_local.reshape({b, l, d});
  Tensor expanded = spike_seq(linear(seq, params.w_m));
  Tensor conv_in = permute(expanded, {0, 2, 1});  // (B, d_inner, L)
  Tensor conv_out = permute(conv1d_depthwise(conv_in, params.conv_w), {0, 2, 1});
  Tensor p_prime = spike_seq(conv_out);  // binary SSM input

  Tensor b_mat = linear(p_prime, params.w_b);  // (B, L, d_state)
  Tensor c_mat = linear(p_prime, params.w_c);  // (B, L, d_state)
  Tensor delta = softplus(add(linear(p_prime, params.w_delta), params.bias_delta));

  Tensor a = neg(exp(params.a_log));  // strictly negative by construction
  Tensor y = ssm_zoh_scan(p_prime, delta, a, b_mat, c_mat);

  Tensor gated = spike_seq(y);
  Tensor projected = linear(gated, params.w_out).reshape({b, t, n, d});
  return hadamard(projected, p_local);
}

}  // namespace spikmamba
