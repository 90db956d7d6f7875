#pragma once

#include <omp.h>

namespace advxl {

/// Execution policy for the per-sample kernels. `serial` is the reference
/// path; `parallel` distributes samples over OpenMP threads. Both write each
/// sample's results into its own slot, so outputs are bitwise identical.
enum class Exec { serial, parallel };

/// Thread cap: ADVXL_NUM_THREADS if set, otherwise the OpenMP default.
int worker_threads();
void set_worker_threads(int n);

template <class Fn>
void for_each_sample(int n, Exec exec, Fn&& fn) {
  if (exec == Exec::serial || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (int i = 0; i < n; ++i) fn(i);
}

}  // namespace advxl
