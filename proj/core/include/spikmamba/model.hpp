#ifndef SPIKMAMBA_MODEL_HPP
#define SPIKMAMBA_MODEL_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spikmamba/ops.hpp"
#include "spikmamba/snn.hpp"
#include "spikmamba/tensor.hpp"

namespace spikmamba {

// Table-2 style branch removals plus the all-ANN variant. An ablated branch
// is skipped entirely: without SLA the block uses P_local = P, without the
// Mamba layer P_global = P_local (its residual passes through).
enum class Ablation { full, sla_only, mamba_only, ann_mode };
const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

// Spike layer evaluation mode. `hard` is the real model (binary spikes,
// rectangular-surrogate backward, detached reset). `relaxed` swaps the
// Heaviside for its hard-sigmoid primitive so the whole network becomes
// finite-difference checkable. `ann` replaces spike layers with SiLU.
enum class SpikeMode { hard, relaxed, ann };

constexpr int kPatch = 8;  // spatial patch edge; conv kernel/stride 1 x 8 x 8

struct ModelConfig {
  int d_model = 64;
  int n_blocks = 2;
  int window = 4;
  int d_inner = 128;
  int d_state = 16;
  int conv_k = 4;
  int ffn_hidden = 256;
  int n_classes = 4;
  int t_frames = 8;  // temporal bins T; drives every spike layer
  int input_h = 64;
  int input_w = 64;
  LifConfig lif;
  Ablation ablation = Ablation::full;

  int n_tokens() const { return (input_h / kPatch) * (input_w / kPatch); }
  void validate() const;

  static ModelConfig desk();   // CPU-trainable defaults
  static ModelConfig paper();  // widths reported for the full-scale model
  static ModelConfig tiny();   // gradient-check and counter-ledger scale
};

struct PatchEmbedParams {
  Tensor conv_w;  // (d_model, 3, 1, kPatch, kPatch), no bias (BN follows)
  BatchNormState bn;
  Tensor pos_embed;  // (T, N, d_model), learned, zero-init
};

struct SpikeSlaParams {
  Tensor w_q, b_q;
  Tensor w_k, b_k;
  Tensor w_v, b_v;
  Tensor w_out, b_out;  // all (d_model, d_model) weights stored input-major
};

struct SpikMambaLayerParams {
  Tensor w_m;         // (d_model, d_inner)
  Tensor conv_w;      // (d_inner, conv_k) depthwise, causal
  Tensor w_b;         // (d_inner, d_state)
  Tensor w_c;         // (d_inner, d_state)
  Tensor w_delta;     // (d_inner, d_inner)
  Tensor bias_delta;  // (d_inner)
  Tensor a_log;       // (d_inner, d_state); A = -exp(a_log)
  Tensor w_out;       // (d_inner, d_model), closes the width gap before the
                      // Hadamard with P_local
};

struct FfnParams {
  Tensor w1;  // (d_model, ffn_hidden)
  Tensor w2;  // (ffn_hidden, d_model)
};

struct BlockParams {
  SpikeSlaParams sla;
  SpikMambaLayerParams mamba;
  FfnParams ffn;
};

struct HeadParams {
  Tensor w;  // (d_model, n_classes)
  Tensor b;  // (n_classes)
};

struct ModelParams {
  PatchEmbedParams patch;
  std::vector<BlockParams> blocks;
  HeadParams head;

  // Trainable tensors with stable dot-separated names, in checkpoint order.
  std::vector<Parameter> parameters();
  // Non-trainable state that must persist (BN running stats).
  std::vector<Parameter> buffers();
};

// --- building blocks (free functions so each contract is testable) ---

// matmul on the last dim plus optional bias broadcast.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

// LIF over axis 1 of (B, T, ...): the shared spike-layer entry point.
Tensor spike_layer(const Tensor& x, const LifConfig& lif, SpikeMode mode);

// (B, T, N, D) -> (B*T/w, w*N, D) and (T, N, D) -> (T/w, w*N, D); pure
// relabeling, bit-exact inverse via window_reverse.
Tensor window_reshape(const Tensor& p, int w);
Tensor window_reverse(const Tensor& p, int w, std::int64_t n_tokens);  // -> (T, N, D)
Tensor window_reverse(const Tensor& p, int w, std::int64_t n_tokens, std::int64_t batch);

// out_i = (q_i . sum_j k_j^T v_j) / (q_i . sum_j k_j + eps), eps = 1e-6,
// evaluated in O(L D^2) through the shared summary matrices. q, k, v are
// (G, L, D) window groups.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor linear_attention(const SpikeTensor& q, const SpikeTensor& k, const Tensor& v);

Tensor patch_embed(const Tensor& x, PatchEmbedParams& params, const LifConfig& lif,
                   SpikeMode mode, bool training);  // (B,3,T,H,W) -> (B,T,N,D)

Tensor spike_sla_forward(const Tensor& p, const SpikeSlaParams& params, int w,
                         const LifConfig& lif, SpikeMode mode);  // (B,T,N,D) -> same

// ZOH: A_bar = exp(delta * A) elementwise; B-scale = (exp(delta*A) - 1) / A
// with the |delta*A| < 1e-6 branch evaluated by series. a: (D,N) strictly
// negative; delta: (B,L,D). Returns (A_bar, B_scale), both (B,L,D,N).
std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a, const Tensor& delta);

// Z[t] = A_bar[t] * Z[t-1] + B_bar[t] * u[t]; y[t,d] = sum_n C[t,n] Z[t,d,n].
// u: (B,L,D); a_bar/b_bar: (B,L,D,N); c: (B,L,N) -> y: (B,L,D).
Tensor selective_scan(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar, const Tensor& c);

// Fused discretize-and-scan used by the Mamba layer: the same math as
// zoh_discretize + B-scaling + selective_scan, evaluated per step without
// materializing the (B,L,D,N) intermediates. a: (D,N) strictly negative;
// u/delta: (B,L,D); b_proj/c: (B,L,N) -> (B,L,D).
Tensor ssm_zoh_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b_proj,
                    const Tensor& c);

Tensor spik_mamba_forward(const Tensor& p_local, const SpikMambaLayerParams& params,
                          const LifConfig& lif, SpikeMode mode);  // (B,T,N,D) -> same

Tensor block_forward(const Tensor& p, const BlockParams& params, const ModelConfig& cfg,
                     SpikeMode mode);

Tensor predict(const Tensor& p_out, const HeadParams& head);  // (B,T,N,D) -> (B,C)

struct CountReport {
  std::int64_t params = 0;         // trainable scalars
  std::int64_t flops = 0;          // multiply-accumulate pairs per forward, B=1
  double gflops() const { return static_cast<double>(flops) * 1e-9; }
};
CountReport count_params_flops(const ModelConfig& cfg);

class SpikMambaModel {
 public:
  SpikMambaModel(ModelConfig cfg, DType dt, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  std::vector<Parameter> parameters() { return params_.parameters(); }
  // Parameters that participate in the configured forward graph: an ablated
  // branch is skipped entirely, so its weights see no gradients and do not
  // belong in the optimizer.
  std::vector<Parameter> active_parameters();
  std::vector<Parameter> buffers() { return params_.buffers(); }

  struct ForwardResult {
    Tensor logits;        // (B, n_classes)
    Tensor p_local_last;  // (B, T, N, D) when captured
  };

  Tensor forward(const Tensor& x, bool training);
  ForwardResult forward_detailed(const Tensor& x, bool training, bool capture_local);

  // Test hook: force every spike layer into the given mode (e.g. relaxed for
  // finite-difference verification). Unset -> hard, or silu in ann_mode.
  void set_spike_mode_override(std::optional<SpikeMode> mode) { mode_override_ = mode; }
  SpikeMode effective_spike_mode() const;

 private:
  ModelConfig cfg_;
  DType dtype_;
  ModelParams params_;
  std::optional<SpikeMode> mode_override_;
};

// Data-driven init normalization: walks the forward once on a calibration
// batch and rescales each spike-feeding weight so its pre-spike activation
// std hits `target_std`. Freshly initialized LIF layers otherwise sit far
// below threshold and pass no surrogate gradient. Deterministic given
// (params, batch); no-op layers whose activations are already on target.
void calibrate_activation_scales(SpikMambaModel& model, const Tensor& frames,
                                 double target_std = 1.5);

// Per-token L2 magnitude of the final block's P_local, min-max normalized
// per frame: (3,T,H,W) input -> (T, H/8, W/8) in [0,1].
Tensor saliency_map(SpikMambaModel& model, const Tensor& frames);

// Checkpoint archive: u64 LE manifest length, JSON manifest {format, config,
// dtype, tensor names + shapes}, then raw little-endian buffers in manifest
// order. Round-trips byte-exactly.
inline constexpr const char* kCheckpointFormat = "spikmamba-ckpt-1";
void save_checkpoint(const SpikMambaModel& model, const std::string& path);
SpikMambaModel load_checkpoint(const std::string& path);

// Serialize/parse the config (used by checkpoints and the CLI echo).
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace spikmamba

#endif  // SPIKMAMBA_MODEL_HPP
