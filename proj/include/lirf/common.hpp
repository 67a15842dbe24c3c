#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lirf {

// Thrown for bad user input (CLI args, malformed files, invalid configs).
// The CLI maps this to exit code 1; anything else is an internal error (2).
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/contract violations inside the tensor library. Message always names
// the primitive and the offending extents.
struct ShapeError : std::runtime_error {
  ShapeError(const std::string& op, const std::string& detail)
      : std::runtime_error(op + ": " + detail), op_name(op) {}
  std::string op_name;
};

std::string format_shape(const std::int64_t* dims, std::size_t rank);

// Counter-style splitmix64 generator. Sub-streams are derived by hashing a
// label (or index) into a fresh seed, so stream layout is stable no matter
// how many draws each consumer makes. Every random choice in the project
// flows from one master seed through named streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Box-Muller, two draws per call (no cached spare, keeps replay trivial).
  double normal();

  Rng stream(std::string_view label) const;
  Rng stream(std::uint64_t index) const;

 private:
  std::uint64_t state_;
};

// Threading. Kernels partition work statically and each output element is
// produced by a fixed serial reduction, so results are bit-identical for
// any thread count.
int thread_count();
void set_thread_count(int n);  // 0 = hardware default

// body(begin, end) over [0, n), split into contiguous chunks.
void parallel_chunks(std::int64_t n, const void* tag,
                     void (*body)(void*, std::int64_t, std::int64_t), void* ctx);

template <class F>
void parallel_for(std::int64_t n, F&& body) {
  struct Thunk {
    F* f;
    static void call(void* ctx, std::int64_t b, std::int64_t e) {
      (*static_cast<Thunk*>(ctx)->f)(b, e);
    }
  } thunk{&body};
  parallel_chunks(n, nullptr, &Thunk::call, &thunk);
}

double wall_seconds();

// FNV-1a over bytes; used for config digests and checkpoint checksums.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL);
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace lirf
