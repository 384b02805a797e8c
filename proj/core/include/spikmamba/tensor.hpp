#ifndef SPIKMAMBA_TENSOR_HPP
#define SPIKMAMBA_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "spikmamba/errors.hpp"

namespace spikmamba {

enum class DType : std::uint8_t { F32, F64 };

inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }
DType dtype_from_name(const std::string& name);

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

namespace detail {

// Raw buffer without value-initialization; tensors at this size are always
// filled by the producing op, and zeroing twice costs a full memory pass.
struct Storage {
  std::unique_ptr<std::byte[]> bytes;
  std::size_t size = 0;

  Storage() = default;
  explicit Storage(std::size_t n) : bytes(new std::byte[n]), size(n) {}
  std::byte* data() { return bytes.get(); }
  const std::byte* data() const { return bytes.get(); }
};

struct GradSlot {
  // Flat grad buffer, same dtype and numel as the owning tensor's data.
  // Unallocated until the first backward accumulation touches it; zero-filled
  // on allocation.
  Storage buf;
  bool allocated = false;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  std::shared_ptr<Storage> data;
  std::shared_ptr<GradSlot> grad;
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major n-d array with optional reverse-mode gradient tracking.
// Value-semantic handle: copies share the underlying buffers. Tensors are
// treated as immutable once produced by an op; only the optimizer writes
// parameter data in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(Shape shape, DType dt);
  static Tensor zeros(Shape shape, DType dt);
  static Tensor full(Shape shape, double value, DType dt);
  static Tensor from_values(Shape shape, const std::vector<double>& values, DType dt);
  static Tensor rand_uniform(Shape shape, DType dt, std::mt19937_64& rng, double lo, double hi);
  static Tensor randn(Shape shape, DType dt, std::mt19937_64& rng, double stddev = 1.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const;
  DType dtype() const { return impl_->dtype; }

  template <typename T>
  T* data() {
    check_dtype<T>();
    return reinterpret_cast<T*>(impl_->data->data());
  }
  template <typename T>
  const T* data() const {
    check_dtype<T>();
    return reinterpret_cast<const T*>(impl_->data->data());
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v);

  // True once any backward step accumulated into this tensor.
  bool has_grad() const;
  // Grad buffer exposed as a plain tensor (same shape/dtype). Allocates
  // zero-filled on first call.
  Tensor grad() const;
  void zero_grad();

  // Raw grad pointer, allocating a zero buffer on demand.
  template <typename T>
  T* grad_data() {
    check_dtype<T>();
    ensure_grad();
    return reinterpret_cast<T*>(impl_->grad->buf.data());
  }

  double item() const;                      // scalar fetch, any dtype
  double at(std::int64_t flat_index) const; // test convenience
  std::vector<double> to_vector() const;

  Tensor clone() const;
  Tensor detach() const;          // shares data, drops grad tracking
  Tensor to(DType dt) const;      // dtype conversion (copy)
  Tensor reshape(Shape s) const;  // view: shares data and grad storage

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);
  template <typename T>
  void check_dtype() const;
  void ensure_grad();

  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

template <>
inline void Tensor::check_dtype<float>() const {
  if (impl_->dtype != DType::F32) throw ContractError("tensor is not f32");
}
template <>
inline void Tensor::check_dtype<double>() const {
  if (impl_->dtype != DType::F64) throw ContractError("tensor is not f64");
}

// Reverse-mode tape. Ops append backward steps in execution order while a
// tape is active; backward() replays them in reverse, accumulating (+=) into
// grad buffers, then clears the recording. Running backward twice without
// re-recording is rejected. One tape is single-threaded; independent tapes
// on disjoint data may run concurrently (the active tape is thread-local).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> step);
  void backward(const Tensor& loss);
  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }
  void clear();

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  friend struct TapeScope;
};

// RAII scope making `tape` the active recording target on this thread.
struct TapeScope {
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  Tape* prev;
};

// RAII scope disabling recording (inference / oracle evaluation).
struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  Tape* prev;
};

// Named trainable tensor. Names are dot-separated paths, unique within one
// parameter collection.
struct Parameter {
  std::string name;
  Tensor tensor;
};

// Number of worker threads for data-parallel inner loops (1 = fully
// sequential). Results are bit-identical regardless of the setting because
// workers own disjoint output rows.
void set_num_threads(int n);
int num_threads();

}  // namespace spikmamba

#endif  // SPIKMAMBA_TENSOR_HPP
