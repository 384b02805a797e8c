#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "spikmamba/model.hpp"
#include "test_util.hpp"

using namespace spikmamba;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::random_binary;
using testutil::random_tensor;

// Brute-force O(L^2) evaluation of the same attention formula.
static std::vector<double> attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                                            double eps = 1e-6) {
  std::int64_t g = q.dim(0), l = q.dim(1), d = q.dim(2);
  auto Q = q.to_vector();
  auto K = k.to_vector();
  auto V = v.to_vector();
  std::vector<double> out(static_cast<std::size_t>(g * l * d), 0.0);
  for (std::int64_t gi = 0; gi < g; ++gi) {
    for (std::int64_t i = 0; i < l; ++i) {
      double den = eps;
      std::vector<double> num(static_cast<std::size_t>(d), 0.0);
      for (std::int64_t j = 0; j < l; ++j) {
        double qk = 0;
        for (std::int64_t a = 0; a < d; ++a) {
          qk += Q[static_cast<std::size_t>((gi * l + i) * d + a)] *
                K[static_cast<std::size_t>((gi * l + j) * d + a)];
        }
        den += qk;
        for (std::int64_t e = 0; e < d; ++e) {
          num[static_cast<std::size_t>(e)] += qk * V[static_cast<std::size_t>((gi * l + j) * d + e)];
        }
      }
      for (std::int64_t e = 0; e < d; ++e) {
        out[static_cast<std::size_t>((gi * l + i) * d + e)] = num[static_cast<std::size_t>(e)] / den;
      }
    }
  }
  return out;
}

TEST_CASE("window reshape: w=1 relabels, w=T collapses to one window") {
  std::mt19937_64 rng(1);
  Tensor p = random_tensor({4, 3, 5}, rng);  // (T,N,D)
  Tensor w1 = window_reshape(p, 1);
  CHECK(w1.shape() == Shape{4, 3, 5});
  CHECK(w1.to_vector() == p.to_vector());

  Tensor wt = window_reshape(p, 4);
  CHECK(wt.shape() == Shape{1, 12, 5});
}

TEST_CASE("window reverse is the exact inverse, bit for bit") {
  std::mt19937_64 rng(2);
  Tensor p = random_tensor({6, 5, 3}, rng);
  Tensor rt = window_reverse(window_reshape(p, 2), 2, 5);
  CHECK(rt.shape() == p.shape());
  CHECK(std::memcmp(rt.data<double>(), p.data<double>(), sizeof(double) * 90) == 0);

  Tensor pb = random_tensor({2, 6, 5, 3}, rng);  // batched
  Tensor rtb = window_reverse(window_reshape(pb, 3), 3, 5, 2);
  CHECK(rtb.shape() == pb.shape());
  CHECK(std::memcmp(rtb.data<double>(), pb.data<double>(), sizeof(double) * 180) == 0);
}

TEST_CASE("window reshape rejects T not divisible by w") {
  Tensor p = Tensor::zeros({5, 2, 3}, DType::F64);
  CHECK_THROWS_AS(window_reshape(p, 2), ShapeError);
}

TEST_CASE("linear attention: single all-ones token returns v") {
  Tensor q = Tensor::full({1, 1, 6}, 1.0, DType::F64);
  Tensor k = Tensor::full({1, 1, 6}, 1.0, DType::F64);
  std::mt19937_64 rng(3);
  Tensor v = random_tensor({1, 1, 6}, rng);
  Tensor out = linear_attention(q, k, v);
  // D * v / (D + eps): equal to v up to the eps guard
  for (int e = 0; e < 6; ++e) CHECK(out.at(e) == doctest::Approx(v.at(e)).epsilon(1e-6));
}

TEST_CASE("linear attention: dead query row gives zero output") {
  std::mt19937_64 rng(4);
  Tensor q = Tensor::zeros({1, 3, 4}, DType::F64);
  Tensor k = random_binary({1, 3, 4}, rng);
  Tensor v = random_tensor({1, 3, 4}, rng);
  Tensor out = linear_attention(q, k, v);
  for (int i = 0; i < 12; ++i) CHECK(out.at(i) == 0.0);
}

TEST_CASE("linear attention streaming form equals the quadratic oracle") {
  std::mt19937_64 rng(5);
  for (int round = 0; round < 30; ++round) {
    std::uniform_int_distribution<std::int64_t> ld(1, 7), dd(1, 6), gd(1, 3);
    Shape s{gd(rng), ld(rng), dd(rng)};
    Tensor q = random_binary(s, rng);
    Tensor k = random_binary(s, rng);
    Tensor v = random_tensor(s, rng);
    Tensor out = linear_attention(q, k, v);
    CHECK(testutil::max_abs_diff(out.to_vector(), attention_oracle(q, k, v)) < 1e-10);
  }
}

TEST_CASE("linear attention gradients FD-checked (continuous q,k)") {
  std::mt19937_64 rng(6);
  Tensor q = random_tensor({2, 3, 4}, rng, 0.1, 1.0).set_requires_grad(true);
  Tensor k = random_tensor({2, 3, 4}, rng, 0.1, 1.0).set_requires_grad(true);
  Tensor v = random_tensor({2, 3, 4}, rng).set_requires_grad(true);
  auto loss = [&] {
    Tensor y = linear_attention(q, k, v);
    return reduce_sum(hadamard(y, y), {0, 1, 2}).item();
  };
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = linear_attention(q, k, v);
    tape.backward(reduce_sum(hadamard(y, y), {0, 1, 2}));
  }
  CHECK(max_rel_err(q.grad().to_vector(), fd_gradient(q, loss)) < 1e-4);
  CHECK(max_rel_err(k.grad().to_vector(), fd_gradient(k, loss)) < 1e-4);
  CHECK(max_rel_err(v.grad().to_vector(), fd_gradient(v, loss)) < 1e-4);
}

TEST_CASE("spike SLA: zero input maps to zero output, shape preserved") {
  ModelConfig cfg = ModelConfig::tiny();
  SpikMambaModel model(cfg, DType::F64, 7);
  Tensor zero = Tensor::zeros({2, cfg.t_frames, cfg.n_tokens(), cfg.d_model}, DType::F64);
  // zero-out the SLA biases so the zero fixed point holds exactly
  auto& sla = model.params().blocks[0].sla;
  for (Tensor* b : {&sla.b_q, &sla.b_k, &sla.b_v, &sla.b_out}) {
    *b = Tensor::zeros(b->shape(), DType::F64).set_requires_grad(true);
  }
  Tensor out = spike_sla_forward(zero, sla, cfg.window, cfg.lif, SpikeMode::hard);
  CHECK(out.shape() == zero.shape());
  for (double x : out.to_vector()) CHECK(x == 0.0);

  std::mt19937_64 rng(8);
  Tensor p = random_tensor({2, cfg.t_frames, cfg.n_tokens(), cfg.d_model}, rng);
  CHECK(spike_sla_forward(p, sla, cfg.window, cfg.lif, SpikeMode::hard).shape() == p.shape());
}

TEST_CASE("spike SLA output is the Hadamard gate of its input") {
  // wherever the input is zero, the output must be zero (out = proj .* p)
  ModelConfig cfg = ModelConfig::tiny();
  SpikMambaModel model(cfg, DType::F64, 9);
  std::mt19937_64 rng(10);
  Tensor p = random_tensor({1, cfg.t_frames, cfg.n_tokens(), cfg.d_model}, rng);
  double* pd = p.data<double>();
  for (std::int64_t i = 0; i < p.numel(); i += 3) pd[i] = 0.0;
  Tensor out = spike_sla_forward(p, model.params().blocks[0].sla, cfg.window, cfg.lif,
                                 SpikeMode::hard);
  for (std::int64_t i = 0; i < p.numel(); i += 3) CHECK(out.at(i) == 0.0);
}
