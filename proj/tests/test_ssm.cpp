#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "spikmamba/model.hpp"
#include "test_util.hpp"

using namespace spikmamba;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::random_tensor;

// Step-by-step recurrence oracle for the scan.
static std::vector<double> scan_oracle(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                                       const Tensor& c) {
  std::int64_t b = u.dim(0), l = u.dim(1), d = u.dim(2), n = a_bar.dim(3);
  auto U = u.to_vector();
  auto A = a_bar.to_vector();
  auto B = b_bar.to_vector();
  auto C = c.to_vector();
  std::vector<double> y(static_cast<std::size_t>(b * l * d), 0.0);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::vector<double> z(static_cast<std::size_t>(d * n), 0.0);
    for (std::int64_t t = 0; t < l; ++t) {
      for (std::int64_t di = 0; di < d; ++di) {
        double acc = 0;
        for (std::int64_t ni = 0; ni < n; ++ni) {
          std::size_t zi = static_cast<std::size_t>(di * n + ni);
          std::size_t abi = static_cast<std::size_t>(((bi * l + t) * d + di) * n + ni);
          z[zi] = A[abi] * z[zi] + B[abi] * U[static_cast<std::size_t>((bi * l + t) * d + di)];
          acc += C[static_cast<std::size_t>((bi * l + t) * n + ni)] * z[zi];
        }
        y[static_cast<std::size_t>((bi * l + t) * d + di)] = acc;
      }
    }
  }
  return y;
}

TEST_CASE("zoh: hand-evaluated delta=1, A=-1 case") {
  Tensor a = Tensor::from_values({1, 1}, {-1.0}, DType::F64);
  Tensor delta = Tensor::full({1, 1, 1}, 1.0, DType::F64);
  auto [a_bar, b_scale] = zoh_discretize(a, delta);
  CHECK(std::fabs(a_bar.item() - 0.36787944117144233) < 1e-12);
  CHECK(std::fabs(b_scale.item() - 0.6321205588285577) < 1e-12);
}

TEST_CASE("zoh: delta -> 0 approaches the identity transition with no injection") {
  Tensor a = Tensor::from_values({1, 1}, {-2.0}, DType::F64);
  Tensor delta = Tensor::full({1, 1, 1}, 1e-12, DType::F64);
  auto [a_bar, b_scale] = zoh_discretize(a, delta);
  CHECK(a_bar.item() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::fabs(b_scale.item()) < 1e-11);
}

TEST_CASE("zoh: series-guard branch agrees with the exact closed form") {
  // |delta*A| = 1e-7 < 1e-6 exercises the series; expm1 is the f64 oracle
  Tensor a = Tensor::from_values({1, 1}, {-1e-3}, DType::F64);
  Tensor delta = Tensor::full({1, 1, 1}, 1e-4, DType::F64);
  auto [a_bar, b_scale] = zoh_discretize(a, delta);
  double x = 1e-4 * -1e-3;
  double oracle = std::expm1(x) / -1e-3;
  CHECK(std::fabs(b_scale.item() - oracle) / oracle < 1e-12);
  CHECK(std::fabs(a_bar.item() - std::exp(x)) < 1e-15);
}

TEST_CASE("zoh matches the scalar exponential oracle on random inputs") {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({3, 2}, rng, -3.0, -0.05);
  Tensor delta = random_tensor({2, 4, 3}, rng, 0.001, 1.5);
  auto [a_bar, b_scale] = zoh_discretize(a, delta);
  auto A = a.to_vector();
  auto D = delta.to_vector();
  for (std::int64_t r = 0; r < 8; ++r) {
    for (std::int64_t d = 0; d < 3; ++d) {
      for (std::int64_t n = 0; n < 2; ++n) {
        double x = D[static_cast<std::size_t>(r * 3 + d)] * A[static_cast<std::size_t>(d * 2 + n)];
        std::int64_t idx = (r * 3 + d) * 2 + n;
        CHECK(std::fabs(a_bar.at(idx) - std::exp(x)) < 1e-12);
        CHECK(std::fabs(b_scale.at(idx) - std::expm1(x) / A[static_cast<std::size_t>(d * 2 + n)]) <
              1e-12);
      }
    }
  }
}

TEST_CASE("zoh rejects non-negative A") {
  Tensor a = Tensor::from_values({1, 2}, {-1.0, 0.0}, DType::F64);
  Tensor delta = Tensor::full({1, 1, 1}, 1.0, DType::F64);
  CHECK_THROWS_AS(zoh_discretize(a, delta), StabilityError);
}

TEST_CASE("zoh gradients FD-checked, including the series branch") {
  std::mt19937_64 rng(12);
  for (double a_scale : {1.0, 1e-4}) {  // second draw pushes |delta*A| under the guard
    Tensor a = random_tensor({2, 2}, rng, -2.0 * a_scale, -0.1 * a_scale).set_requires_grad(true);
    Tensor delta = random_tensor({1, 3, 2}, rng, 1e-3, 0.8).set_requires_grad(true);
    auto loss = [&] {
      auto [ab, bs] = zoh_discretize(a, delta);
      return reduce_sum(add(hadamard(ab, ab), scale(bs, 3.0)), {0, 1, 2, 3}).item();
    };
    Tape tape;
    {
      TapeScope scope(tape);
      auto [ab, bs] = zoh_discretize(a, delta);
      tape.backward(reduce_sum(add(hadamard(ab, ab), scale(bs, 3.0)), {0, 1, 2, 3}));
    }
    CHECK(max_rel_err(a.grad().to_vector(), fd_gradient(a, loss)) < 1e-4);
    CHECK(max_rel_err(delta.grad().to_vector(), fd_gradient(delta, loss)) < 1e-4);
  }
}

TEST_CASE("selective scan: A_bar = 0 is memoryless") {
  std::mt19937_64 rng(13);
  Tensor u = random_tensor({1, 4, 2}, rng);
  Tensor a_bar = Tensor::zeros({1, 4, 2, 3}, DType::F64);
  Tensor b_bar = random_tensor({1, 4, 2, 3}, rng);
  Tensor c = random_tensor({1, 4, 3}, rng);
  Tensor y = selective_scan(u, a_bar, b_bar, c);
  // y[t,d] = sum_n c[t,n] * b_bar[t,d,n] * u[t,d], no dependence on the past
  for (std::int64_t t = 0; t < 4; ++t) {
    for (std::int64_t d = 0; d < 2; ++d) {
      double want = 0;
      for (std::int64_t n = 0; n < 3; ++n) {
        want += c.at(t * 3 + n) * b_bar.at((t * 2 + d) * 3 + n) * u.at(t * 2 + d);
      }
      CHECK(y.at(t * 2 + d) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("selective scan: unit parameters accumulate a running sum") {
  Tensor u = Tensor::from_values({1, 5, 1}, {1, 2, 3, 4, 5}, DType::F64);
  Tensor ones4 = Tensor::full({1, 5, 1, 1}, 1.0, DType::F64);
  Tensor ones3 = Tensor::full({1, 5, 1}, 1.0, DType::F64);
  Tensor y = selective_scan(u, ones4, ones4, ones3);
  CHECK(y.to_vector() == std::vector<double>{1, 3, 6, 10, 15});
}

TEST_CASE("selective scan equals the naive recurrence oracle on random instances") {
  std::mt19937_64 rng(14);
  for (int round = 0; round < 25; ++round) {
    std::uniform_int_distribution<std::int64_t> ld(1, 9), dd(1, 5), nd(1, 4), bd(1, 2);
    std::int64_t b = bd(rng), l = ld(rng), d = dd(rng), n = nd(rng);
    Tensor u = random_tensor({b, l, d}, rng);
    Tensor a_bar = random_tensor({b, l, d, n}, rng, 0.0, 1.0);
    Tensor b_bar = random_tensor({b, l, d, n}, rng);
    Tensor c = random_tensor({b, l, n}, rng);
    Tensor y = selective_scan(u, a_bar, b_bar, c);
    CHECK(testutil::max_abs_diff(y.to_vector(), scan_oracle(u, a_bar, b_bar, c)) < 1e-12);
  }
}

TEST_CASE("selective scan gradients FD-checked") {
  std::mt19937_64 rng(15);
  Tensor u = random_tensor({1, 4, 2}, rng).set_requires_grad(true);
  Tensor a_bar = random_tensor({1, 4, 2, 2}, rng, 0.1, 0.9).set_requires_grad(true);
  Tensor b_bar = random_tensor({1, 4, 2, 2}, rng).set_requires_grad(true);
  Tensor c = random_tensor({1, 4, 2}, rng).set_requires_grad(true);
  auto loss = [&] {
    Tensor y = selective_scan(u, a_bar, b_bar, c);
    return reduce_sum(hadamard(y, y), {0, 1, 2}).item();
  };
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = selective_scan(u, a_bar, b_bar, c);
    tape.backward(reduce_sum(hadamard(y, y), {0, 1, 2}));
  }
  CHECK(max_rel_err(u.grad().to_vector(), fd_gradient(u, loss)) < 1e-4);
  CHECK(max_rel_err(a_bar.grad().to_vector(), fd_gradient(a_bar, loss)) < 1e-4);
  CHECK(max_rel_err(b_bar.grad().to_vector(), fd_gradient(b_bar, loss)) < 1e-4);
  CHECK(max_rel_err(c.grad().to_vector(), fd_gradient(c, loss)) < 1e-4);
}

TEST_CASE("A_bar stays inside (0,1) for positive delta when A = -exp(a_log)") {
  std::mt19937_64 rng(16);
  Tensor a_log = random_tensor({4, 3}, rng, -2.0, 2.0);
  Tensor a = neg(exp(a_log));
  Tensor delta = random_tensor({2, 5, 4}, rng, 1e-6, 10.0);
  auto [a_bar, b_scale] = zoh_discretize(a, delta);
  for (std::int64_t i = 0; i < a_bar.numel(); ++i) {
    CHECK(a_bar.at(i) > 0.0);
    CHECK(a_bar.at(i) < 1.0);
  }
}

TEST_CASE("spik_mamba_forward: zero input, zero output; shape preserved") {
  ModelConfig cfg = ModelConfig::tiny();
  SpikMambaModel model(cfg, DType::F64, 21);
  const auto& mamba = model.params().blocks[0].mamba;
  Tensor zero = Tensor::zeros({2, cfg.t_frames, cfg.n_tokens(), cfg.d_model}, DType::F64);
  Tensor out = spik_mamba_forward(zero, mamba, cfg.lif, SpikeMode::hard);
  CHECK(out.shape() == zero.shape());
  for (double v : out.to_vector()) CHECK(v == 0.0);

  std::mt19937_64 rng(22);
  Tensor p = random_tensor({1, cfg.t_frames, cfg.n_tokens(), cfg.d_model}, rng);
  CHECK(spik_mamba_forward(p, mamba, cfg.lif, SpikeMode::hard).shape() == p.shape());
}

TEST_CASE("spik_mamba_forward matches a hand-built recurrence on a tiny instance") {
  // Drive the layer with an input whose spikes are forced, then verify the
  // scan segment against the oracle by recomputing the same intermediates.
  ModelConfig cfg = ModelConfig::tiny();
  SpikMambaModel model(cfg, DType::F64, 23);
  auto& mamba = model.params().blocks[0].mamba;
  std::mt19937_64 rng(24);
  Tensor p = random_tensor({1, cfg.t_frames, cfg.n_tokens(), cfg.d_model}, rng, 0.5, 3.0);

  Tensor out = spik_mamba_forward(p, mamba, cfg.lif, SpikeMode::hard);

  // recompute the pipeline up to the scan with library ops
  std::int64_t l = static_cast<std::int64_t>(cfg.t_frames) * cfg.n_tokens();
  Tensor seq = p.reshape({1, l, cfg.d_model});
  auto spike_seq = [&](const Tensor& x) {
    return spike_layer(x.reshape({1, cfg.t_frames, cfg.n_tokens(), x.dim(2)}), cfg.lif,
                       SpikeMode::hard)
        .reshape({1, l, x.dim(2)});
  };
  Tensor expanded = spike_seq(linear(seq, mamba.w_m));
  Tensor conv_out =
      permute(conv1d_depthwise(permute(expanded, {0, 2, 1}), mamba.conv_w), {0, 2, 1});
  Tensor p_prime = spike_seq(conv_out);
  // p_prime must be binary: it feeds the SSM
  for (double v : p_prime.to_vector()) CHECK((v == 0.0 || v == 1.0));
  Tensor delta = softplus(add(linear(p_prime, mamba.w_delta), mamba.bias_delta));
  auto [a_bar, b_scale] = zoh_discretize(neg(exp(mamba.a_log)), delta);
  Tensor b_bar = hadamard(b_scale, linear(p_prime, mamba.w_b).reshape({1, l, 1, cfg.d_state}));
  Tensor y_scan = selective_scan(p_prime, a_bar, b_bar, linear(p_prime, mamba.w_c));
  CHECK(testutil::max_abs_diff(
            y_scan.to_vector(),
            scan_oracle(p_prime, a_bar, b_bar, linear(p_prime, mamba.w_c))) < 1e-12);
  Tensor gated = spike_seq(y_scan);
  Tensor expected = hadamard(linear(gated, mamba.w_out).reshape(p.shape()), p);
  CHECK(testutil::max_abs_diff(out.to_vector(), expected.to_vector()) == 0.0);
}

TEST_CASE("fused zoh+scan equals the composed route exactly") {
  std::mt19937_64 rng(31);
  std::int64_t b = 2, l = 6, d = 3, n = 4;
  Tensor u = random_tensor({b, l, d}, rng);
  Tensor delta = random_tensor({b, l, d}, rng, 1e-3, 0.5);
  Tensor a = random_tensor({d, n}, rng, -2.0, -0.05);
  Tensor b_proj = random_tensor({b, l, n}, rng);
  Tensor c = random_tensor({b, l, n}, rng);

  Tensor fused = ssm_zoh_scan(u, delta, a, b_proj, c);
  auto [a_bar, b_scale] = zoh_discretize(a, delta);
  Tensor b_bar = hadamard(b_scale, b_proj.reshape({b, l, 1, n}));
  Tensor composed = selective_scan(u, a_bar, b_bar, c);
  CHECK(testutil::max_abs_diff(fused.to_vector(), composed.to_vector()) < 1e-14);
}

TEST_CASE("fused zoh+scan gradients FD-checked") {
  std::mt19937_64 rng(32);
  Tensor u = random_tensor({1, 5, 2}, rng).set_requires_grad(true);
  Tensor delta = random_tensor({1, 5, 2}, rng, 0.01, 0.6).set_requires_grad(true);
  Tensor a = random_tensor({2, 3}, rng, -2.0, -0.1).set_requires_grad(true);
  Tensor b_proj = random_tensor({1, 5, 3}, rng).set_requires_grad(true);
  Tensor c = random_tensor({1, 5, 3}, rng).set_requires_grad(true);
  auto loss = [&] {
    Tensor y = ssm_zoh_scan(u, delta, a, b_proj, c);
    return reduce_sum(hadamard(y, y), {0, 1, 2}).item();
  };
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = ssm_zoh_scan(u, delta, a, b_proj, c);
    tape.backward(reduce_sum(hadamard(y, y), {0, 1, 2}));
  }
  CHECK(max_rel_err(u.grad().to_vector(), fd_gradient(u, loss)) < 1e-4);
  CHECK(max_rel_err(delta.grad().to_vector(), fd_gradient(delta, loss)) < 1e-4);
  CHECK(max_rel_err(a.grad().to_vector(), fd_gradient(a, loss)) < 1e-4);
  CHECK(max_rel_err(b_proj.grad().to_vector(), fd_gradient(b_proj, loss)) < 1e-4);
  CHECK(max_rel_err(c.grad().to_vector(), fd_gradient(c, loss)) < 1e-4);
}
