#include "spikmamba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <malloc.h>

namespace spikmamba {

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw ConfigError("unknown dtype '" + name + "'");
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace {

// Large activation buffers cycle every training step; keep them on the main
// heap so freed blocks are reused instead of returned to the kernel.
const bool g_heap_tuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 28);
#endif
  return true;
}();

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dt) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->dtype = dt;
  impl->data = std::make_shared<detail::Storage>(
      static_cast<std::size_t>(shape_numel(shape)) * dtype_size(dt));
  impl->grad = std::make_shared<detail::GradSlot>();
  impl->shape = std::move(shape);
  return impl;
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::empty(Shape shape, DType dt) { return wrap(make_impl(std::move(shape), dt)); }

Tensor Tensor::zeros(Shape shape, DType dt) {
  Tensor t = empty(std::move(shape), dt);
  std::memset(t.impl()->data->data(), 0, t.impl()->data->size);
  return t;
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = empty(std::move(shape), dt);
  std::int64_t n = t.numel();
  if (dt == DType::F32) {
    float v = static_cast<float>(value);
    float* p = t.data<float>();
    std::fill(p, p + n, v);
  } else {
    double* p = t.data<double>();
    std::fill(p, p + n, value);
  }
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dt) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not fill shape " +
                     shape_str(shape));
  }
  Tensor t = empty(std::move(shape), dt);
  if (dt == DType::F32) {
    float* p = t.data<float>();
    for (std::size_t i = 0; i < values.size(); ++i) p[i] = static_cast<float>(values[i]);
  } else {
    double* p = t.data<double>();
    std::copy(values.begin(), values.end(), p);
  }
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, DType dt, std::mt19937_64& rng, double lo, double hi) {
  Tensor t = empty(std::move(shape), dt);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::int64_t n = t.numel();
  if (dt == DType::F32) {
    float* p = t.data<float>();
    for (std::int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(dist(rng));
  } else {
    double* p = t.data<double>();
    for (std::int64_t i = 0; i < n; ++i) p[i] = dist(rng);
  }
  return t;
}

Tensor Tensor::randn(Shape shape, DType dt, std::mt19937_64& rng, double stddev) {
  Tensor t = empty(std::move(shape), dt);
  std::normal_distribution<double> dist(0.0, stddev);
  std::int64_t n = t.numel();
  if (dt == DType::F32) {
    float* p = t.data<float>();
    for (std::int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(dist(rng));
  } else {
    double* p = t.data<double>();
    for (std::int64_t i = 0; i < n; ++i) p[i] = dist(rng);
  }
  return t;
}

std::int64_t Tensor::numel() const { return shape_numel(impl_->shape); }

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const {
  return impl_ && impl_->grad && impl_->grad->allocated;
}

void Tensor::ensure_grad() {
  auto& slot = *impl_->grad;
  if (!slot.allocated) {
    if (slot.buf.size != impl_->data->size) slot.buf = detail::Storage(impl_->data->size);
    std::memset(slot.buf.data(), 0, slot.buf.size);
    slot.allocated = true;
  }
}

Tensor Tensor::grad() const {
  auto self = const_cast<Tensor*>(this);
  self->ensure_grad();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  // Alias the grad slot's buffer as plain data. The grad of a grad is not a
  // thing here (no higher-order derivatives), so the slot stays fresh.
  impl->data = std::shared_ptr<detail::Storage>(impl_->grad, &impl_->grad->buf);
  impl->grad = std::make_shared<detail::GradSlot>();
  return wrap(std::move(impl));
}

void Tensor::zero_grad() {
  if (impl_ && impl_->grad) impl_->grad->allocated = false;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
  return at(0);
}

double Tensor::at(std::int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel()) throw ContractError("index out of range");
  if (impl_->dtype == DType::F32) return static_cast<double>(data<float>()[flat_index]);
  return data<double>()[flat_index];
}

std::vector<double> Tensor::to_vector() const {
  std::int64_t n = numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  if (impl_->dtype == DType::F32) {
    const float* p = data<float>();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = p[i];
  } else {
    const double* p = data<double>();
    std::copy(p, p + n, out.begin());
  }
  return out;
}

Tensor Tensor::clone() const {
  Tensor t = empty(impl_->shape, impl_->dtype);
  std::memcpy(t.impl()->data->data(), impl_->data->data(), impl_->data->size);
  return t;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  impl->grad = std::make_shared<detail::GradSlot>();
  impl->requires_grad = false;
  return wrap(std::move(impl));
}

Tensor Tensor::to(DType dt) const {
  if (dt == impl_->dtype) return clone();
  Tensor t = empty(impl_->shape, dt);
  std::int64_t n = numel();
  if (dt == DType::F32) {
    const double* src = data<double>();
    float* dst = t.data<float>();
    for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
  } else {
    const float* src = data<float>();
    double* dst = t.data<double>();
    for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
  }
  return t;
}

Tensor Tensor::reshape(Shape s) const {
  if (shape_numel(s) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(impl_->shape) + " to " + shape_str(s));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(s);
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  impl->grad = impl_->grad;  // views accumulate into the same grad storage
  impl->requires_grad = impl_->requires_grad;
  return wrap(std::move(impl));
}

// --- tape ---

namespace {
thread_local Tape* g_active_tape = nullptr;
int g_num_threads = 1;
}  // namespace

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> step) {
  steps_.push_back(std::move(step));
  consumed_ = false;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) throw ContractError("backward() needs a scalar loss");
  if (steps_.empty()) {
    throw ContractError(consumed_ ? "backward() on an already-consumed tape"
                                  : "backward() on an empty tape");
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss is not connected to any recorded operation");
  }
  // Seed d(loss)/d(loss) = 1.
  Tensor seed = loss;
  if (seed.dtype() == DType::F32) {
    seed.grad_data<float>()[0] += 1.0f;
  } else {
    seed.grad_data<double>()[0] += 1.0;
  }
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
  consumed_ = true;
}

void Tape::clear() {
  steps_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : prev(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev; }

NoGradScope::NoGradScope() : prev(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev; }

void set_num_threads(int n) {
  if (n < 1) throw ConfigError("thread count must be >= 1");
  g_num_threads = n;
}

int num_threads() { return g_num_threads; }

}  // namespace spikmamba
