#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sb {

// Error taxonomy. ConfigError / DimError / IoError are caller mistakes
// (CLI exit 2), NumericError / TrainError are runtime failures (CLI exit 3).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DimError : public ConfigError {
 public:
  explicit DimError(const std::string& msg) : ConfigError(msg) {}
};

class IoError : public ConfigError {
 public:
  explicit IoError(const std::string& msg) : ConfigError(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

class TrainError : public Error {
 public:
  explicit TrainError(const std::string& msg) : Error(msg) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic Gaussian/uniform source. Box-Muller on top of xoshiro-style
// splitmix state so streams are portable across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x5b1ce5Ull)) {}

  // Independent child stream; index picks the branch.
  Rng fork(std::uint64_t index) const {
    return Rng(splitmix64(state_ ^ (0x9e3779b97f4a7c15ULL * (index + 1))));
  }

  std::uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal();

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// FNV-1a over raw bytes; used for parameter checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sb
