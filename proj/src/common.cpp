#include "lirf/common.hpp"

#include <malloc.h>
#include <omp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace lirf {

namespace {
// Large activation buffers are allocated and freed every step; keeping them
// on the heap instead of round-tripping through mmap avoids page-fault churn
// that otherwise dominates the big matmuls.
struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  }
};
const MallocTuning g_malloc_tuning;
}  // namespace

std::string format_shape(const std::int64_t* dims, std::size_t rank) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < rank; ++i) {
    if (i) os << ",";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

double Rng::normal() {
  // Guard against log(0).
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

Rng Rng::stream(std::string_view label) const {
  std::uint64_t h = fnv1a(label, state_ ^ 0xA0761D6478BD642FULL);
  return Rng(h);
}

Rng Rng::stream(std::uint64_t index) const {
  std::uint64_t bytes[2] = {state_, index};
  return Rng(fnv1a(bytes, sizeof(bytes)));
}

namespace {
std::atomic<int> g_threads{0};

int resolve_threads() {
  int n = g_threads.load(std::memory_order_relaxed);
  if (n > 0) return n;
  if (const char* env = std::getenv("LIRF_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}
}  // namespace

int thread_count() { return resolve_threads(); }

void set_thread_count(int n) { g_threads.store(n, std::memory_order_relaxed); }

void parallel_chunks(std::int64_t n, const void*,
                     void (*body)(void*, std::int64_t, std::int64_t), void* ctx) {
  if (n <= 0) return;
  int nt = std::min<std::int64_t>(thread_count(), n);
  if (nt <= 1 || n < 256 || omp_in_parallel()) {
    body(ctx, 0, n);
    return;
  }
#pragma omp parallel num_threads(nt)
  {
    int t = omp_get_thread_num();
    int total = omp_get_num_threads();
    std::int64_t chunk = (n + total - 1) / total;
    std::int64_t b = std::min<std::int64_t>(n, static_cast<std::int64_t>(t) * chunk);
    std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b < e) body(ctx, b, e);
  }
}

double wall_seconds() {
  using clock = std::chrono::steady_clock;
  static const clock::time_point t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace lirf
