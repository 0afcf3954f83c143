#pragma once

// Shared utilities: deterministic RNG, missing-value sentinel, chunked
// parallel loops whose results are independent of the thread count, and
// number formatting helpers.

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace relrisk {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Missing values. Numeric cells use quiet NaN as the missing marker; it is
// distinct from every representable value and routes natively through the
// GBDT split logic.

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double x) { return std::isnan(x); }

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 has a standard-specified sequence; the
// derived draws below avoid std::*_distribution, whose output is
// implementation-defined.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derive an independent stream seed from (base, stream index).
inline uint64_t mix_seed(uint64_t base, uint64_t stream) {
  return splitmix64(splitmix64(base) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (two uniforms per draw, no cached state).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Thread control. A single global knob set by the CLI's --threads flag.
// Work is split into chunks whose boundaries depend only on the grain, so
// every parallel section produces identical results at any thread count.

inline std::atomic<unsigned>& thread_count_slot() {
  static std::atomic<unsigned> n{std::thread::hardware_concurrency()};
  return n;
}

inline void set_thread_count(unsigned n) { thread_count_slot() = n == 0 ? 1u : n; }
inline unsigned thread_count() { return thread_count_slot().load(); }

// fn(begin, end) is invoked once per chunk; chunks never overlap.
inline void parallel_for(size_t n, size_t grain, const std::function<void(size_t, size_t)>& fn) {
  if (n == 0) return;
  if (grain == 0) grain = 1;
  const size_t nchunks = (n + grain - 1) / grain;
  const unsigned threads = thread_count();
  if (threads <= 1 || nchunks <= 1) {
    for (size_t c = 0; c < nchunks; ++c) fn(c * grain, std::min(n, (c + 1) * grain));
    return;
  }
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t c = next.fetch_add(1); c < nchunks; c = next.fetch_add(1)) {
      fn(c * grain, std::min(n, (c + 1) * grain));
    }
  };
  std::vector<std::thread> pool;
  const unsigned extra = std::min<unsigned>(threads, static_cast<unsigned>(nchunks)) - 1;
  pool.reserve(extra);
  for (unsigned t = 0; t < extra; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Formatting.

// Shortest decimal form that round-trips the exact double.
inline std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string fmt_fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
  return std::string(buf);
}

}  // namespace relrisk
