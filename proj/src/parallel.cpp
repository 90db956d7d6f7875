#include "advxl/parallel.hpp"

#include <cstdlib>
#include <string>

namespace advxl {

namespace {

int& thread_override() {
  static int n = [] {
    if (const char* env = std::getenv("ADVXL_NUM_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
    return 0;
  }();
  return n;
}

}  // namespace

int worker_threads() {
  const int n = thread_override();
  return n > 0 ? n : omp_get_max_threads();
}

void set_worker_threads(int n) { thread_override() = n > 0 ? n : 0; }

}  // namespace advxl
