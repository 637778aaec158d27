#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tokenplan {

// Error taxonomy. The CLI maps these onto exit codes, so new error kinds
// should derive from one of the types below rather than std::runtime_error.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SizeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SequenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

using Rng = std::mt19937_64;

// All randomness flows from one root seed via named sub-streams so that
// components (data, init, sampling, rl, ...) can be varied independently.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t state = root ^ fnv1a64(name);
  splitmix64(state);
  return splitmix64(state);
}

inline Rng make_rng(std::uint64_t root, std::string_view name) {
  return Rng(substream_seed(root, name));
}

inline Rng make_rng(std::uint64_t root, std::string_view name, std::uint64_t index) {
  std::uint64_t state = substream_seed(root, name) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  splitmix64(state);
  return Rng(splitmix64(state));
}

// Exact round-trip double formatting for text artifacts (byte-stable reruns).
std::string fmt_g17(double v);
// Shorter fixed-significance formatting for report CSVs.
std::string fmt_g9(double v);

}  // namespace tokenplan
