#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fccl {

/// SplitMix64 finalizer, used to decorrelate derived seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of a named sub-stream. Stable under edits to unrelated streams.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the name
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(root ^ mix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index) {
  return mix64(derive_seed(root, stream) + mix64(index + 1));
}

/// Thin wrapper over mt19937_64 with the two draws the simulator needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fccl
