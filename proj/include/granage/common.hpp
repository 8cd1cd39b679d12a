#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace granage {

// Invalid arguments, out-of-range indices, malformed inputs.
class ValueError : public std::invalid_argument {
public:
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// I/O and state failures at run time (unreadable files, bad archives, ...).
class RuntimeError : public std::runtime_error {
public:
  explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Config-file validation failure; carries the full list of problems so a
// caller can report every bad key at once.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

private:
  static std::string join(const std::vector<std::string>& ps) {
    std::string out = "invalid configuration:";
    for (const auto& p : ps) out += "\n  - " + p;
    return out;
  }
  std::vector<std::string> problems_;
};

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic counter-seeded generator (xoshiro256**). Streams are derived
// by hashing (seed, stream ids); the same ids always yield the same sequence
// regardless of call order elsewhere, which is what the data-loading
// determinism contract relies on.
class Rng {
public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  static Rng derive(uint64_t seed, std::initializer_list<uint64_t> stream) {
    uint64_t sm = seed ^ 0xa0761d6478bd642fULL;
    uint64_t acc = splitmix64(sm);
    for (uint64_t id : stream) {
      sm = acc ^ (id + 0xe7037ed1a0b428dbULL);
      acc = splitmix64(sm);
    }
    return Rng(acc);
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range via 128-bit multiply-high.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    const auto wide = static_cast<unsigned __int128>(next_u64()) * span;
    return lo + static_cast<int64_t>(wide >> 64);
  }

  // Box-Muller; uncached so the draw count is a pure function of the calls.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
  std::array<uint64_t, 4> state_{};
};

// Units-in-the-last-place distance between two finite doubles.
inline uint64_t ulp_distance(double a, double b) {
  if (a == b) return 0;
  if (!std::isfinite(a) || !std::isfinite(b)) return UINT64_MAX;
  auto to_ordered = [](double x) {
    int64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    return bits < 0 ? std::numeric_limits<int64_t>::min() - bits : bits;
  };
  const int64_t ia = to_ordered(a);
  const int64_t ib = to_ordered(b);
  return ia > ib ? static_cast<uint64_t>(ia) - static_cast<uint64_t>(ib)
                 : static_cast<uint64_t>(ib) - static_cast<uint64_t>(ia);
}

}  // namespace granage
