#ifndef SPIKMAMBA_SNN_HPP
#define SPIKMAMBA_SNN_HPP

#include <utility>

#include "spikmamba/tensor.hpp"

namespace spikmamba {

// Leaky Integrate-and-Fire neuron:
//   H[t] = V[t-1] + (1/tau) * (x[t] - (V[t-1] - v_reset))
//   S[t] = heaviside(H[t] - v_th)        (spike on H >= v_th)
//   V[t] = H[t] * (1 - S[t]) + v_reset * S[t]
struct LifConfig {
  double tau = 2.0;
  double v_th = 1.0;
  double v_reset = 0.0;
  double surrogate_width = 1.0;  // rectangular window width a

  void validate() const {
    if (tau <= 1.0) throw ConfigError("LIF tau must be > 1");
    if (v_th <= v_reset) throw ConfigError("LIF v_th must exceed v_reset");
    if (surrogate_width <= 0.0) throw ConfigError("LIF surrogate width must be > 0");
  }
};

// Membrane potentials carried across time steps, one per neuron.
struct LifState {
  Tensor v;
  static LifState initial(const Shape& shape, DType dt, const LifConfig& cfg);
};

// Tensor whose forward values are exactly 0.0 or 1.0.
struct SpikeTensor {
  Tensor values;
};

// One LIF step. Plain forward evaluation (no gradient recording); the
// trainable path is lif_sequence.
std::pair<SpikeTensor, LifState> lif_step(const Tensor& x_t, const LifState& state,
                                          const LifConfig& cfg);

// LIF unrolled over the leading time axis; state starts at v_reset and is not
// carried across calls. Differentiable: backward uses the rectangular
// surrogate dS/dH = (1/a) * 1[|H - v_th| < a/2] and detaches the reset term.
SpikeTensor lif_sequence(const Tensor& x, const LifConfig& cfg);

// Smooth stand-in for lif_sequence used to verify gradients end to end by
// finite differences: the Heaviside becomes the hard sigmoid
// clamp((H - v_th)/a + 1/2, 0, 1), whose derivative inside the window equals
// the rectangular surrogate, and the reset path is differentiated exactly.
// Outputs are in [0, 1], not binary.
Tensor lif_sequence_relaxed(const Tensor& x, const LifConfig& cfg);

// lif_sequence with time on axis 1 of (B, T, ...); avoids the transpose
// shuttle when unrolling batched activations.
Tensor lif_over_time_axis1(const Tensor& x, const LifConfig& cfg, bool relaxed);

// Surrogate derivative applied to an upstream gradient:
// out = upstream * (1/a) * 1[|h_minus_vth| < a/2].
Tensor heaviside_surrogate_backward(const Tensor& h_minus_vth, const Tensor& upstream,
                                    const LifConfig& cfg);

}  // namespace spikmamba

#endif  // SPIKMAMBA_SNN_HPP
