#include <cmath>
#include <cstring>

#include "kernel_utils.hpp"
#include "spikmamba/model.hpp"

namespace spikmamba {

using detail::gemm_nn;
using detail::i64;
using detail::transpose2d;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

Tensor spike_layer(const Tensor& x, const LifConfig& lif, SpikeMode mode) {
  switch (mode) {
    case SpikeMode::ann:
      return silu(x);
    case SpikeMode::relaxed:
      return lif_over_time_axis1(x, lif, true);
    case SpikeMode::hard:
      break;
  }
  return lif_over_time_axis1(x, lif, false);
}

namespace {

// Spike layer over the per-window time axis: (G, w*N, D) -> same, with LIF
// unrolled across the w frames inside each window.
Tensor windowed_spike(const Tensor& x, int w, i64 n_tokens, const LifConfig& lif, SpikeMode mode) {
  i64 g = x.dim(0), d = x.dim(2);
  Tensor folded = x.reshape({g, w, n_tokens, d});
  Tensor s = spike_layer(folded, lif, mode);
  return s.reshape({g, static_cast<i64>(w) * n_tokens, d});
}

}  // namespace

Tensor window_reshape(const Tensor& p, int w) {
  if (w < 1) throw ConfigError("window size must be >= 1");
  if (p.ndim() == 3) {
    i64 t = p.dim(0), n = p.dim(1), d = p.dim(2);
    if (t % w) {
      throw ShapeError("T=" + std::to_string(t) + " not divisible by window " + std::to_string(w));
    }
    return p.reshape({t / w, static_cast<i64>(w) * n, d});
  }
  if (p.ndim() == 4) {
    i64 b = p.dim(0), t = p.dim(1), n = p.dim(2), d = p.dim(3);
    if (t % w) {
      throw ShapeError("T=" + std::to_string(t) + " not divisible by window " + std::to_string(w));
    }
    return p.reshape({b * (t / w), static_cast<i64>(w) * n, d});
  }
  throw ShapeError("window_reshape expects (T,N,D) or (B,T,N,D), got " + shape_str(p.shape()));
}

Tensor window_reverse(const Tensor& p, int w, std::int64_t n_tokens, std::int64_t batch) {
  if (p.ndim() != 3) {
    throw ShapeError("window_reverse expects (G, w*N, D), got " + shape_str(p.shape()));
  }
  i64 g = p.dim(0), wn = p.dim(1), d = p.dim(2);
  if (wn != static_cast<i64>(w) * n_tokens) {
    throw ShapeError("window_reverse: got " + std::to_string(wn) +
                     " tokens per window, expected w*N=" +
                     std::to_string(static_cast<i64>(w) * n_tokens));
  }
  if (batch < 1 || g % batch) {
    throw ShapeError("window_reverse: group count " + std::to_string(g) +
                     " not divisible by batch " + std::to_string(batch));
  }
  i64 t = (g / batch) * w;
  return p.reshape({batch, t, n_tokens, d});
}

Tensor window_reverse(const Tensor& p, int w, std::int64_t n_tokens) {
  Tensor r = window_reverse(p, w, n_tokens, 1);
  return r.reshape({r.dim(1), r.dim(2), r.dim(3)});
}

namespace {

constexpr double kAttEps = 1e-6;

template <typename T>
struct AttSaved {
  std::vector<T> s_kv;  // (G, D, D)
  std::vector<T> s_k;   // (G, D)
  std::vector<T> den;   // (G, L)
};

template <typename T>
void att_forward(const Tensor& q, const Tensor& k, const Tensor& v, Tensor& out,
                 AttSaved<T>& saved) {
  i64 g = q.dim(0), l = q.dim(1), d = q.dim(2);
  saved.s_kv.assign(static_cast<std::size_t>(g * d * d), T(0));
  saved.s_k.assign(static_cast<std::size_t>(g * d), T(0));
  saved.den.assign(static_cast<std::size_t>(g * l), T(0));
  const T* pq = q.data<T>();
  const T* pk = k.data<T>();
  const T* pv = v.data<T>();
  T* po = out.data<T>();
  for (i64 gi = 0; gi < g; ++gi) {
    const T* qg = pq + gi * l * d;
    const T* kg = pk + gi * l * d;
    const T* vg = pv + gi * l * d;
    T* s_kv = saved.s_kv.data() + gi * d * d;
    T* s_k = saved.s_k.data() + gi * d;
    T* den = saved.den.data() + gi * l;
    // summaries: s_kv[a][e] = sum_j k[j,a] v[j,e]; s_k[a] = sum_j k[j,a]
    for (i64 j = 0; j < l; ++j) {
      const T* krow = kg + j * d;
      const T* vrow = vg + j * d;
      for (i64 a = 0; a < d; ++a) {
        T kv = krow[a];
        if (kv == T(0)) continue;  // binary keys are mostly zero
        T* dst = s_kv + a * d;
        for (i64 e = 0; e < d; ++e) dst[e] += kv * vrow[e];
        s_k[a] += kv;
      }
    }
    // numerators in one gemm, then per-row denominators
    gemm_nn<T>(l, d, d, qg, s_kv, po + gi * l * d, false);
    for (i64 i = 0; i < l; ++i) {
      const T* qrow = qg + i * d;
      T acc = 0;
      for (i64 a = 0; a < d; ++a) acc += qrow[a] * s_k[a];
      T denom = acc + static_cast<T>(kAttEps);
      den[i] = denom;
      T inv = T(1) / denom;
      T* orow = po + (gi * l + i) * d;
      for (i64 e = 0; e < d; ++e) orow[e] *= inv;
    }
  }
}

template <typename T>
void att_backward(Tensor& q, Tensor& k, Tensor& v, Tensor& out, const AttSaved<T>& saved) {
  i64 g = q.dim(0), l = q.dim(1), d = q.dim(2);
  const T* gy = out.grad_data<T>();
  const T* po = out.data<T>();
  const T* pq = q.data<T>();
  const T* pk = k.data<T>();
  const T* pv = v.data<T>();
  std::vector<T> dnum(static_cast<std::size_t>(l * d));
  std::vector<T> dden(static_cast<std::size_t>(l));
  std::vector<T> ds_kv(static_cast<std::size_t>(d * d));
  std::vector<T> ds_k(static_cast<std::size_t>(d));
  for (i64 gi = 0; gi < g; ++gi) {
    const T* qg = pq + gi * l * d;
    const T* kg = pk + gi * l * d;
    const T* vg = pv + gi * l * d;
    const T* og = po + gi * l * d;
    const T* gyg = gy + gi * l * d;
    const T* s_kv = saved.s_kv.data() + gi * d * d;
    const T* s_k = saved.s_k.data() + gi * d;
    const T* den = saved.den.data() + gi * l;
    for (i64 i = 0; i < l; ++i) {
      T inv = T(1) / den[i];
      T acc = 0;
      const T* gyrow = gyg + i * d;
      const T* orow = og + i * d;
      T* dnrow = dnum.data() + i * d;
      for (i64 e = 0; e < d; ++e) {
        dnrow[e] = gyrow[e] * inv;
        acc += orow[e] * gyrow[e];
      }
      dden[static_cast<std::size_t>(i)] = -acc * inv;
    }
    if (q.requires_grad()) {
      // dq = dnum @ s_kv^T + dden (outer) s_k
      auto s_kv_t = transpose2d<T>(d, d, s_kv);
      T* gq = q.grad_data<T>() + gi * l * d;
      gemm_nn<T>(l, d, d, dnum.data(), s_kv_t.data(), gq, true);
      for (i64 i = 0; i < l; ++i) {
        T dd = dden[static_cast<std::size_t>(i)];
        T* gqrow = gq + i * d;
        for (i64 a = 0; a < d; ++a) gqrow[a] += dd * s_k[a];
      }
    }
    if (k.requires_grad() || v.requires_grad()) {
      // ds_kv = q^T @ dnum; ds_k = q^T @ dden
      std::memset(ds_kv.data(), 0, ds_kv.size() * sizeof(T));
      std::memset(ds_k.data(), 0, ds_k.size() * sizeof(T));
      for (i64 i = 0; i < l; ++i) {
        const T* qrow = qg + i * d;
        const T* dnrow = dnum.data() + i * d;
        T dd = dden[static_cast<std::size_t>(i)];
        for (i64 a = 0; a < d; ++a) {
          T qv = qrow[a];
          if (qv == T(0)) continue;
          T* dst = ds_kv.data() + a * d;
          for (i64 e = 0; e < d; ++e) dst[e] += qv * dnrow[e];
          ds_k[static_cast<std::size_t>(a)] += qv * dd;
        }
      }
      if (k.requires_grad()) {
        // dk[j] = v[j] @ ds_kv^T + ds_k
        auto ds_kv_t = transpose2d<T>(d, d, ds_kv.data());
        T* gk = k.grad_data<T>() + gi * l * d;
        gemm_nn<T>(l, d, d, vg, ds_kv_t.data(), gk, true);
        for (i64 j = 0; j < l; ++j) {
          T* gkrow = gk + j * d;
          for (i64 a = 0; a < d; ++a) gkrow[a] += ds_k[static_cast<std::size_t>(a)];
        }
      }
      if (v.requires_grad()) {
        // dv = k @ ds_kv
        gemm_nn<T>(l, d, d, kg, ds_kv.data(), v.grad_data<T>() + gi * l * d, true);
      }
    }
  }
}

}  // namespace

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.ndim() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("linear_attention expects matching (G,L,D) operands, got " +
                     shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  }
  Tensor out = Tensor::empty(q.shape(), q.dtype());
  if (q.dtype() == DType::F32) {
    auto saved = std::make_shared<AttSaved<float>>();
    att_forward<float>(q, k, v, out, *saved);
    if (detail::wants_grad({&q, &k, &v})) {
      out.set_requires_grad(true);
      Tensor qc = q, kc = k, vc = v, oc = out;
      Tape::active()->record([qc, kc, vc, oc, saved]() mutable {
        if (!oc.has_grad()) return;
        att_backward<float>(qc, kc, vc, oc, *saved);
      });
    }
  } else {
    auto saved = std::make_shared<AttSaved<double>>();
    att_forward<double>(q, k, v, out, *saved);
    if (detail::wants_grad({&q, &k, &v})) {
      out.set_requires_grad(true);
      Tensor qc = q, kc = k, vc = v, oc = out;
      Tape::active()->record([qc, kc, vc, oc, saved]() mutable {
        if (!oc.has_grad()) return;
        att_backward<double>(qc, kc, vc, oc, *saved);
      });
    }
  }
  return out;
}

Tensor linear_attention(const SpikeTensor& q, const SpikeTensor& k, const Tensor& v) {
  return linear_attention(q.values, k.values, v);
}

Tensor patch_embed(const Tensor& x, PatchEmbedParams& params, const LifConfig& lif, SpikeMode mode,
                   bool training) {
  if (x.ndim() != 5) {
    throw ShapeError("patch_embed expects (B,3,T,H,W), got " + shape_str(x.shape()));
  }
  i64 h = x.dim(3), w = x.dim(4);
  if (h % kPatch || w % kPatch) {
    throw ShapeError("spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch size " + std::to_string(kPatch));
  }
  Tensor c = conv3d(x, params.conv_w, {1, kPatch, kPatch});  // (B,D,T,h',w')
  Tensor n = batchnorm(c, params.bn, training);
  i64 b = n.dim(0), d = n.dim(1), t = n.dim(2), hp = n.dim(3), wp = n.dim(4);
  Tensor tokens = permute(n, {0, 2, 3, 4, 1}).reshape({b, t, hp * wp, d});
  Tensor spikes = spike_layer(tokens, lif, mode);
  return add(spikes, params.pos_embed);  // PE is continuous, added after the spike layer
}

Tensor spike_sla_forward(const Tensor& p, const SpikeSlaParams& params, int w,
                         const LifConfig& lif, SpikeMode mode) {
  if (p.ndim() != 4) {
    throw ShapeError("spike_sla_forward expects (B,T,N,D), got " + shape_str(p.shape()));
  }
  i64 b = p.dim(0), n = p.dim(2);
  Tensor pw = window_reshape(p, w);  // (G, w*N, D)
  Tensor q = windowed_spike(linear(pw, params.w_q, params.b_q), w, n, lif, mode);
  Tensor k = windowed_spike(linear(pw, params.w_k, params.b_k), w, n, lif, mode);
  Tensor v = linear(pw, params.w_v, params.b_v);  // value stays continuous
  Tensor att = linear_attention(q, k, v);
  Tensor p_att = windowed_spike(att, w, n, lif, mode);
  Tensor projected = linear(p_att, params.w_out, params.b_out);
  Tensor reversed = window_reverse(projected, w, n, b);
  return hadamard(reversed, p);
}

}  // namespace spikmamba
