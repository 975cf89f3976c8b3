#pragma once

#include <algorithm>
#include <cstdint>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cct {

namespace detail {
inline int& thread_count_ref() {
  static int n = 1;
  return n;
}
}  // namespace detail

inline int num_threads() { return detail::thread_count_ref(); }

/// Sets the worker count for kernels and GEMM. Results are bitwise identical
/// for a fixed count: work is only split across independent output elements.
inline void set_num_threads(int n) {
  n = std::max(1, n);
  detail::thread_count_ref() = n;
  Eigen::setNbThreads(n);
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

/// Static-schedule loop over [0, n). `fn(i)` must only write state owned by i.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
#ifdef _OPENMP
  if (num_threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(num_threads())
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

}  // namespace cct
