#include <cmath>

#include "spikmamba/model.hpp"

namespace spikmamba {

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::sla_only: return "sla_only";
    case Ablation::mamba_only: return "mamba_only";
    case Ablation::ann_mode: return "ann_mode";
  }
  return "?";
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "full") return Ablation::full;
  if (name == "sla_only") return Ablation::sla_only;
  if (name == "mamba_only") return Ablation::mamba_only;
  if (name == "ann_mode") return Ablation::ann_mode;
  throw ConfigError("unknown ablation '" + name + "' (full|sla_only|mamba_only|ann_mode)");
}

void ModelConfig::validate() const {
  if (d_model < 1 || n_blocks < 1 || window < 1 || d_inner < 1 || d_state < 1 || conv_k < 1 ||
      ffn_hidden < 1 || n_classes < 1 || t_frames < 1) {
    throw ConfigError("all model dimensions must be >= 1");
  }
  if (input_h % kPatch || input_w % kPatch) {
    throw ConfigError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " not divisible by patch size " + std::to_string(kPatch));
  }
  if (t_frames % window) {
    throw ConfigError("T=" + std::to_string(t_frames) + " not divisible by window " +
                      std::to_string(window));
  }
  lif.validate();
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.d_model = 256;
  c.d_inner = 2048;
  c.ffn_hidden = 1024;
  c.d_state = 16;
  c.n_blocks = 2;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_model = 8;
  c.n_blocks = 1;
  c.window = 2;
  c.d_inner = 16;
  c.d_state = 4;
  c.conv_k = 2;
  c.ffn_hidden = 16;
  c.n_classes = 2;
  c.t_frames = 4;
  c.input_h = 16;
  c.input_w = 16;
  return c;
}

namespace {

Tensor init_linear(std::int64_t fan_in, Shape shape, DType dt, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::rand_uniform(std::move(shape), dt, rng, -bound, bound).set_requires_grad(true);
}

Tensor init_a_log(int d_inner, int d_state, DType dt) {
  // S4D-real: A = -(n+1), stored in log space per channel
  std::vector<double> v(static_cast<std::size_t>(d_inner) * d_state);
  for (int d = 0; d < d_inner; ++d) {
    for (int n = 0; n < d_state; ++n) {
      v[static_cast<std::size_t>(d * d_state + n)] = std::log(static_cast<double>(n + 1));
    }
  }
  return Tensor::from_values({d_inner, d_state}, v, dt).set_requires_grad(true);
}

Tensor init_bias_delta(int d_inner, DType dt, std::mt19937_64& rng) {
  // inverse softplus of log-uniform dt in [1e-3, 1e-1]
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  std::vector<double> v(static_cast<std::size_t>(d_inner));
  for (auto& e : v) {
    double dt_target = std::exp(u(rng));
    e = std::log(std::expm1(dt_target));
  }
  return Tensor::from_values({d_inner}, v, dt).set_requires_grad(true);
}

ModelParams init_params(const ModelConfig& cfg, DType dt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams p;
  std::int64_t conv_fan = 3 * 1 * kPatch * kPatch;
  p.patch.conv_w = init_linear(conv_fan, {cfg.d_model, 3, 1, kPatch, kPatch}, dt, rng);
  p.patch.bn = BatchNormState::make(cfg.d_model, dt);
  p.patch.pos_embed =
      Tensor::zeros({cfg.t_frames, cfg.n_tokens(), cfg.d_model}, dt).set_requires_grad(true);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    BlockParams blk;
    auto lin = [&](int in, int out) { return init_linear(in, {in, out}, dt, rng); };
    auto bias = [&](int in, int out) { return init_linear(in, {out}, dt, rng); };
    blk.sla.w_q = lin(cfg.d_model, cfg.d_model);
    blk.sla.b_q = bias(cfg.d_model, cfg.d_model);
    blk.sla.w_k = lin(cfg.d_model, cfg.d_model);
    blk.sla.b_k = bias(cfg.d_model, cfg.d_model);
    blk.sla.w_v = lin(cfg.d_model, cfg.d_model);
    blk.sla.b_v = bias(cfg.d_model, cfg.d_model);
    blk.sla.w_out = lin(cfg.d_model, cfg.d_model);
    blk.sla.b_out = bias(cfg.d_model, cfg.d_model);
    blk.mamba.w_m = lin(cfg.d_model, cfg.d_inner);
    blk.mamba.conv_w = init_linear(cfg.conv_k, {cfg.d_inner, cfg.conv_k}, dt, rng);
    blk.mamba.w_b = lin(cfg.d_inner, cfg.d_state);
    blk.mamba.w_c = lin(cfg.d_inner, cfg.d_state);
    blk.mamba.w_delta = lin(cfg.d_inner, cfg.d_inner);
    blk.mamba.bias_delta = init_bias_delta(cfg.d_inner, dt, rng);
    blk.mamba.a_log = init_a_log(cfg.d_inner, cfg.d_state, dt);
    blk.mamba.w_out = lin(cfg.d_inner, cfg.d_model);
    blk.ffn.w1 = lin(cfg.d_model, cfg.ffn_hidden);
    blk.ffn.w2 = lin(cfg.ffn_hidden, cfg.d_model);
    p.blocks.push_back(std::move(blk));
  }
  p.head.w = init_linear(cfg.d_model, {cfg.d_model, cfg.n_classes}, dt, rng);
  p.head.b = init_linear(cfg.d_model, {cfg.n_classes}, dt, rng);
  return p;
}

}  // namespace

std::vector<Parameter> ModelParams::parameters() {
  std::vector<Parameter> out;
  out.push_back({"patch_embed.conv_w", patch.conv_w});
  out.push_back({"patch_embed.bn.gamma", patch.bn.gamma});
  out.push_back({"patch_embed.bn.beta", patch.bn.beta});
  out.push_back({"patch_embed.pos_embed", patch.pos_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    std::string base = "blocks." + std::to_string(i) + ".";
    BlockParams& b = blocks[i];
    out.push_back({base + "sla.w_q", b.sla.w_q});
    out.push_back({base + "sla.b_q", b.sla.b_q});
    out.push_back({base + "sla.w_k", b.sla.w_k});
    out.push_back({base + "sla.b_k", b.sla.b_k});
    out.push_back({base + "sla.w_v", b.sla.w_v});
    out.push_back({base + "sla.b_v", b.sla.b_v});
    out.push_back({base + "sla.w_out", b.sla.w_out});
    out.push_back({base + "sla.b_out", b.sla.b_out});
    out.push_back({base + "mamba.w_m", b.mamba.w_m});
    out.push_back({base + "mamba.conv_w", b.mamba.conv_w});
    out.push_back({base + "mamba.w_b", b.mamba.w_b});
    out.push_back({base + "mamba.w_c", b.mamba.w_c});
    out.push_back({base + "mamba.w_delta", b.mamba.w_delta});
    out.push_back({base + "mamba.bias_delta", b.mamba.bias_delta});
    out.push_back({base + "mamba.a_log", b.mamba.a_log});
    out.push_back({base + "mamba.w_out", b.mamba.w_out});
    out.push_back({base + "ffn.w1", b.ffn.w1});
    out.push_back({base + "ffn.w2", b.ffn.w2});
  }
  out.push_back({"head.w", head.w});
  out.push_back({"head.b", head.b});
  return out;
}

std::vector<Parameter> ModelParams::buffers() {
  return {{"patch_embed.bn.running_mean", patch.bn.running_mean},
          {"patch_embed.bn.running_var", patch.bn.running_var}};
}

Tensor block_forward(const Tensor& p, const BlockParams& params, const ModelConfig& cfg,
                     SpikeMode mode) {
  // An ablated branch is skipped: no SLA -> P_local = P; no Mamba -> its
  // residual passes P_local through unchanged.
  Tensor p_local = cfg.ablation == Ablation::mamba_only
                       ? p
                       : spike_sla_forward(p, params.sla, cfg.window, cfg.lif, mode);
  Tensor p_global = cfg.ablation == Ablation::sla_only
                        ? p_local
                        : add(spik_mamba_forward(p_local, params.mamba, cfg.lif, mode), p_local);
  Tensor hidden = spike_layer(linear(p_global, params.ffn.w1), cfg.lif, mode);
  return add(linear(hidden, params.ffn.w2), p_global);
}

Tensor predict(const Tensor& p_out, const HeadParams& head) {
  if (p_out.ndim() != 4) throw ShapeError("predict expects (B,T,N,D)");
  Tensor pooled = reduce_mean(p_out, {1, 2});  // GAP over time and tokens
  return linear(pooled, head.w, head.b);
}

CountReport count_params_flops(const ModelConfig& cfg) {
  cfg.validate();
  CountReport r;
  std::int64_t d = cfg.d_model, di = cfg.d_inner, ns = cfg.d_state, f = cfg.ffn_hidden;
  std::int64_t t = cfg.t_frames, n = cfg.n_tokens(), l = t * n, c = cfg.n_classes;
  std::int64_t k = cfg.conv_k;

  // parameters
  std::int64_t patch = d * 3 * 1 * kPatch * kPatch + 2 * d + t * n * d;
  std::int64_t sla = 4 * (d * d + d);
  std::int64_t mamba = d * di + di * k + 2 * di * ns + di * di + di + di * ns + di * d;
  std::int64_t ffn = 2 * d * f;
  r.params = patch + cfg.n_blocks * (sla + mamba + ffn) + (d * c + c);

  // multiply-accumulate pairs for one forward at batch 1
  std::int64_t conv_macs = (3 * kPatch * kPatch) * d * l;
  std::int64_t sla_macs = 4 * l * d * d  // q,k,v,out projections
                          + 2 * l * d * d + l * d;  // kv summary + query side + denominators
  std::int64_t mamba_macs = l * d * di   // expansion
                            + l * di * k // depthwise conv
                            + 2 * l * di * ns  // B and C projections
                            + l * di * di      // delta projection
                            + l * di * ns      // scan
                            + l * di * d;      // output projection
  std::int64_t ffn_macs = 2 * l * d * f;
  r.flops = conv_macs + cfg.n_blocks * (sla_macs + mamba_macs + ffn_macs) + d * c;
  return r;
}

SpikMambaModel::SpikMambaModel(ModelConfig cfg, DType dt, std::uint64_t seed)
    : cfg_(std::move(cfg)), dtype_(dt) {
  cfg_.validate();
  params_ = init_params(cfg_, dt, seed);
}

std::vector<Parameter> SpikMambaModel::active_parameters() {
  std::vector<Parameter> all = params_.parameters();
  if (cfg_.ablation != Ablation::sla_only && cfg_.ablation != Ablation::mamba_only) return all;
  const char* skip = cfg_.ablation == Ablation::sla_only ? ".mamba." : ".sla.";
  std::vector<Parameter> out;
  for (auto& p : all) {
    if (p.name.find(skip) == std::string::npos) out.push_back(p);
  }
  return out;
}

SpikeMode SpikMambaModel::effective_spike_mode() const {
  if (mode_override_) return *mode_override_;
  return cfg_.ablation == Ablation::ann_mode ? SpikeMode::ann : SpikeMode::hard;
}

Tensor SpikMambaModel::forward(const Tensor& x, bool training) {
  return forward_detailed(x, training, false).logits;
}

SpikMambaModel::ForwardResult SpikMambaModel::forward_detailed(const Tensor& x, bool training,
                                                               bool capture_local) {
  SpikeMode mode = effective_spike_mode();
  Tensor p = patch_embed(x, params_.patch, cfg_.lif, mode, training);
  ForwardResult result;
  for (std::size_t i = 0; i < params_.blocks.size(); ++i) {
    const BlockParams& blk = params_.blocks[i];
    bool last = i + 1 == params_.blocks.size();
    if (capture_local && last) {
      Tensor p_local = cfg_.ablation == Ablation::mamba_only
                           ? p
                           : spike_sla_forward(p, blk.sla, cfg_.window, cfg_.lif, mode);
      result.p_local_last = p_local;
      Tensor p_global = cfg_.ablation == Ablation::sla_only
                            ? p_local
                            : add(spik_mamba_forward(p_local, blk.mamba, cfg_.lif, mode), p_local);
      Tensor hidden = spike_layer(linear(p_global, blk.ffn.w1), cfg_.lif, mode);
      p = add(linear(hidden, blk.ffn.w2), p_global);
    } else {
      p = block_forward(p, blk, cfg_, mode);
    }
  }
  result.logits = predict(p, params_.head);
  return result;
}

namespace {

double tensor_std(const Tensor& t) {
  auto v = t.to_vector();
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double sq = 0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return std::sqrt(sq / static_cast<double>(v.size()));
}

void rescale_inplace(Tensor& t, double factor) {
  std::int64_t n = t.numel();
  if (t.dtype() == DType::F32) {
    float* p = t.data<float>();
    for (std::int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(p[i] * factor);
  } else {
    double* p = t.data<double>();
    for (std::int64_t i = 0; i < n; ++i) p[i] *= factor;
  }
}

// target/actual with dead-layer and runaway guards
double calib_factor(double target, double actual) {
  if (actual < 1e-8) return 1.0;
  return std::clamp(target / actual, 1e-2, 1e2);
}

}  // namespace

void calibrate_activation_scales(SpikMambaModel& model, const Tensor& frames, double target_std) {
  NoGradScope ng;
  const ModelConfig& cfg = model.config();
  SpikeMode mode = model.effective_spike_mode();
  ModelParams& mp = model.params();
  std::int64_t batch = frames.dim(0);
  std::int64_t n_tok = cfg.n_tokens();
  std::int64_t l = static_cast<std::int64_t>(cfg.t_frames) * n_tok;

  // patch: BN gain so the spike layer sees target-scale inputs
  {
    Tensor c = conv3d(frames, mp.patch.conv_w, {1, kPatch, kPatch});
    // measure through a BN clone; the real state must not absorb the probe
    BatchNormState probe = mp.patch.bn;
    probe.running_mean = mp.patch.bn.running_mean.clone();
    probe.running_var = mp.patch.bn.running_var.clone();
    Tensor normed = batchnorm(c, probe, true);
    rescale_inplace(mp.patch.bn.gamma, calib_factor(target_std, tensor_std(normed)));
  }
  Tensor p = patch_embed(frames, mp.patch, cfg.lif, mode, true);

  auto wspike = [&](const Tensor& x) {
    std::int64_t g = x.dim(0), d2 = x.dim(2);
    return spike_layer(x.reshape({g, cfg.window, n_tok, d2}), cfg.lif, mode)
        .reshape({g, static_cast<std::int64_t>(cfg.window) * n_tok, d2});
  };
  auto seq_spike = [&](const Tensor& x) {
    std::int64_t d2 = x.dim(2);
    return spike_layer(x.reshape({batch, cfg.t_frames, n_tok, d2}), cfg.lif, mode)
        .reshape({batch, l, d2});
  };

  for (BlockParams& blk : mp.blocks) {
    Tensor p_local;
    if (cfg.ablation == Ablation::mamba_only) {
      p_local = p;
    } else {
      Tensor pw = window_reshape(p, cfg.window);
      Tensor q_pre = linear(pw, blk.sla.w_q, blk.sla.b_q);
      double fq = calib_factor(target_std, tensor_std(q_pre));
      rescale_inplace(blk.sla.w_q, fq);
      rescale_inplace(blk.sla.b_q, fq);
      Tensor q = wspike(scale(q_pre, fq));

      Tensor k_pre = linear(pw, blk.sla.w_k, blk.sla.b_k);
      double fk = calib_factor(target_std, tensor_std(k_pre));
      rescale_inplace(blk.sla.w_k, fk);
      rescale_inplace(blk.sla.b_k, fk);
      Tensor k = wspike(scale(k_pre, fk));

      Tensor att = linear_attention(q, k, linear(pw, blk.sla.w_v, blk.sla.b_v));
      double fv = calib_factor(target_std, tensor_std(att));  // attention is linear in v
      rescale_inplace(blk.sla.w_v, fv);
      rescale_inplace(blk.sla.b_v, fv);
      Tensor p_att = wspike(scale(att, fv));

      Tensor gate = hadamard(window_reverse(linear(p_att, blk.sla.w_out, blk.sla.b_out),
                                            cfg.window, n_tok, batch),
                             p);
      double fo = calib_factor(1.0, tensor_std(gate));
      rescale_inplace(blk.sla.w_out, fo);
      rescale_inplace(blk.sla.b_out, fo);
      p_local = scale(gate, fo);
    }

    Tensor p_global;
    if (cfg.ablation == Ablation::sla_only) {
      p_global = p_local;
    } else {
      Tensor seq = p_local.reshape({batch, l, cfg.d_model});
      Tensor m_pre = linear(seq, blk.mamba.w_m);
      double fm = calib_factor(target_std, tensor_std(m_pre));
      rescale_inplace(blk.mamba.w_m, fm);
      Tensor m_spikes = seq_spike(scale(m_pre, fm));

      Tensor conv_out =
          permute(conv1d_depthwise(permute(m_spikes, {0, 2, 1}), blk.mamba.conv_w), {0, 2, 1});
      double fc = calib_factor(target_std, tensor_std(conv_out));
      rescale_inplace(blk.mamba.conv_w, fc);
      Tensor p_prime = seq_spike(scale(conv_out, fc));

      Tensor delta = softplus(add(linear(p_prime, blk.mamba.w_delta), blk.mamba.bias_delta));
      Tensor a = neg(exp(blk.mamba.a_log));
      Tensor y = ssm_zoh_scan(p_prime, delta, a, linear(p_prime, blk.mamba.w_b),
                              linear(p_prime, blk.mamba.w_c));
      // y is bilinear in (B, C): split the correction across both projections
      double fy = std::sqrt(calib_factor(target_std, tensor_std(y)));
      rescale_inplace(blk.mamba.w_b, fy);
      rescale_inplace(blk.mamba.w_c, fy);
      Tensor gated = seq_spike(scale(y, fy * fy));
      Tensor proj = linear(gated, blk.mamba.w_out).reshape({batch, cfg.t_frames, n_tok, cfg.d_model});
      p_global = add(hadamard(proj, p_local), p_local);
    }

    Tensor ffn_pre = linear(p_global, blk.ffn.w1);
    double ff = calib_factor(target_std, tensor_std(ffn_pre));
    rescale_inplace(blk.ffn.w1, ff);
    Tensor hidden = spike_layer(scale(ffn_pre, ff), cfg.lif, mode);
    p = add(linear(hidden, blk.ffn.w2), p_global);
  }
}

Tensor saliency_map(SpikMambaModel& model, const Tensor& frames) {
  if (frames.ndim() != 4) throw ShapeError("saliency_map expects one (3,T,H,W) clip");
  const ModelConfig& cfg = model.config();
  Shape batched = frames.shape();
  batched.insert(batched.begin(), 1);
  NoGradScope ng;
  auto result = model.forward_detailed(frames.reshape(batched), false, true);
  Tensor p_local = result.p_local_last;  // (1, T, N, D)
  std::int64_t t = p_local.dim(1), n = p_local.dim(2), d = p_local.dim(3);
  std::int64_t hp = cfg.input_h / kPatch, wp = cfg.input_w / kPatch;
  Tensor map = Tensor::zeros({t, hp, wp}, DType::F32);
  float* out = map.data<float>();
  auto v = p_local.to_vector();
  for (std::int64_t ti = 0; ti < t; ++ti) {
    double lo = 0, hi = 0;
    std::vector<double> norms(static_cast<std::size_t>(n));
    for (std::int64_t ni = 0; ni < n; ++ni) {
      double acc = 0;
      for (std::int64_t dj = 0; dj < d; ++dj) {
        double e = v[static_cast<std::size_t>((ti * n + ni) * d + dj)];
        acc += e * e;
      }
      norms[static_cast<std::size_t>(ni)] = std::sqrt(acc);
      if (ni == 0) {
        lo = hi = norms[0];
      } else {
        lo = std::min(lo, norms[static_cast<std::size_t>(ni)]);
        hi = std::max(hi, norms[static_cast<std::size_t>(ni)]);
      }
    }
    double range = hi - lo;
    for (std::int64_t ni = 0; ni < n; ++ni) {
      // degenerate per-frame range -> all zeros
      double val = range > 0 ? (norms[static_cast<std::size_t>(ni)] - lo) / range : 0.0;
      out[ti * hp * wp + ni] = static_cast<float>(val);
    }
  }
  return map;
}

}  // namespace spikmamba
