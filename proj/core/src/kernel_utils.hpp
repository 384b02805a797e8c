#ifndef SPIKMAMBA_SRC_KERNEL_UTILS_HPP
#define SPIKMAMBA_SRC_KERNEL_UTILS_HPP

#include <cstdint>
#include <cstring>
#include <thread>
#include <vector>

#include "spikmamba/tensor.hpp"

namespace spikmamba::detail {

using i64 = std::int64_t;

// c (MxN) = a (MxK) @ b (KxN), all row-major. accumulate keeps c's contents.
// Rows of c are partitioned across threads; per-row arithmetic order is
// fixed, so results are bit-identical for any thread count.
template <typename T>
void gemm_nn(i64 m, i64 k, i64 n, const T* a, const T* b, T* c, bool accumulate) {
  auto run_rows = [=](i64 row_begin, i64 row_end) {
    for (i64 i = row_begin; i < row_end; ++i) {
      T* crow = c + i * n;
      if (!accumulate) std::memset(crow, 0, static_cast<std::size_t>(n) * sizeof(T));
      const T* arow = a + i * k;
      for (i64 p = 0; p < k; ++p) {
        T av = arow[p];
        if (av == T(0)) continue;  // spike inputs are mostly zero
        const T* brow = b + p * n;
        for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  };
  int threads = num_threads();
  if (threads <= 1 || m < 2 * threads) {
    run_rows(0, m);
    return;
  }
  std::vector<std::thread> pool;
  i64 chunk = (m + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    i64 lo = t * chunk;
    i64 hi = std::min<i64>(m, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(run_rows, lo, hi);
  }
  for (auto& th : pool) th.join();
}

template <typename T>
std::vector<T> transpose2d(i64 rows, i64 cols, const T* src) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (i64 r = 0; r < rows; ++r)
    for (i64 c = 0; c < cols; ++c) out[static_cast<std::size_t>(c * rows + r)] = src[r * cols + c];
  return out;
}

inline std::vector<i64> row_major_strides(const Shape& s) {
  std::vector<i64> st(s.size());
  i64 acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}

// Trailing-dimension alignment; size-1 dims stretch.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    i64 da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    i64 db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expanded to `out` rank, 0 where broadcast.
inline std::vector<i64> broadcast_strides(const Shape& in, const Shape& out) {
  auto in_strides = row_major_strides(in);
  std::vector<i64> st(out.size(), 0);
  std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    st[offset + i] = (in[i] == 1 && out[offset + i] != 1) ? 0 : in_strides[i];
  }
  return st;
}

inline bool wants_grad(std::initializer_list<const Tensor*> ts) {
  if (!Tape::active()) return false;
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace spikmamba::detail

#endif  // SPIKMAMBA_SRC_KERNEL_UTILS_HPP
