#pragma once

#include <cassert>
#include <cstddef>
#include <cstring>
#include <functional>
#include <thread>
#include <vector>

namespace ctok {

// Dense row-major matrix. The training loop lives and dies by the three gemm
// variants below, so their inner loops are arranged to keep the contiguous
// dimension innermost for auto-vectorization.
template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, T(0)) {}

  T* row(int i) { return v.data() + static_cast<size_t>(i) * cols; }
  const T* row(int i) const { return v.data() + static_cast<size_t>(i) * cols; }
  T& operator()(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  T operator()(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return v.size(); }
  void zero() { std::fill(v.begin(), v.end(), T(0)); }
};

// c[m x n] += a[m x k] * b[k x n]   (or assign when accumulate is false)
template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* __restrict__ ci = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::memset(ci, 0, sizeof(T) * n);
    const T* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* __restrict__ bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
template <typename T>
void gemm_at_b(const T* a, const T* b, T* c, int k, int m, int n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(T) * static_cast<size_t>(m) * n);
  for (int p = 0; p < k; ++p) {
    const T* ap = a + static_cast<size_t>(p) * m;
    const T* __restrict__ bp = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T api = ap[i];
      if (api == T(0)) continue;
      T* __restrict__ ci = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void gemm_a_bt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<size_t>(i) * k;
    T* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* __restrict__ bj = b + static_cast<size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

template <typename T>
T dot(const T* __restrict__ a, const T* __restrict__ b, int n) {
  T acc = 0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* __restrict__ x, T* __restrict__ y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Runs fn(begin, end) over contiguous chunks of [0, n). With workers <= 1 the
// call is inlined on the current thread. Chunking is a pure function of
// (n, workers), so results that reduce chunk outputs in chunk order are
// reproducible for a fixed worker count.
inline void parallel_chunks(int n, int workers, const std::function<void(int, int, int)>& fn) {
  if (workers <= 1 || n <= 1) {
    fn(0, 0, n);
    return;
  }
  const int used = std::min(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(used);
  const int base = n / used, extra = n % used;
  int begin = 0;
  for (int t = 0; t < used; ++t) {
    const int len = base + (t < extra ? 1 : 0);
    pool.emplace_back(fn, t, begin, begin + len);
    begin += len;
  }
  for (auto& th : pool) th.join();
}

}  // namespace ctok
