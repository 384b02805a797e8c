#ifndef SPIKMAMBA_TESTS_TEST_UTIL_HPP
#define SPIKMAMBA_TESTS_TEST_UTIL_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spikmamba/tensor.hpp"

namespace testutil {

using spikmamba::DType;
using spikmamba::NoGradScope;
using spikmamba::Shape;
using spikmamba::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            DType dt = DType::F64) {
  return Tensor::rand_uniform(std::move(shape), dt, rng, lo, hi);
}

inline Tensor random_binary(Shape shape, std::mt19937_64& rng, DType dt = DType::F64) {
  std::vector<double> v(static_cast<std::size_t>(spikmamba::shape_numel(shape)));
  std::bernoulli_distribution bit(0.5);
  for (auto& e : v) e = bit(rng) ? 1.0 : 0.0;
  return Tensor::from_values(std::move(shape), v, dt);
}

// Central finite differences of a scalar-valued rebuild function with respect
// to every element of x (f64, in-place perturbation).
inline std::vector<double> fd_gradient(Tensor x, const std::function<double()>& eval_loss,
                                       double h = 1e-5) {
  NoGradScope ng;
  std::int64_t n = x.numel();
  std::vector<double> grad(static_cast<std::size_t>(n));
  double* p = x.data<double>();
  for (std::int64_t i = 0; i < n; ++i) {
    double keep = p[i];
    p[i] = keep + h;
    double up = eval_loss();
    p[i] = keep - h;
    double down = eval_loss();
    p[i] = keep;
    grad[static_cast<std::size_t>(i)] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline double rel_err(double got, double want) {
  double denom = std::max({std::fabs(got), std::fabs(want), 1e-8});
  return std::fabs(got - want) / denom;
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, rel_err(got[i], want[i]));
  return worst;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

// Unique scratch directory under the build tree; wiped on construction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / ("spikmamba_test_" + name);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

}  // namespace testutil

#endif  // SPIKMAMBA_TESTS_TEST_UTIL_HPP
