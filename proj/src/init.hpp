#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "rundet/tensor.hpp"

namespace rundet::detail {

// Each parameter draws from its own stream keyed by (seed, name), so a
// parameter's initial value does not depend on which other modules exist.
inline std::mt19937_64 param_rng(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

inline void normal_init(Tensor& t, double stddev, std::uint64_t seed, const std::string& name) {
  auto rng = param_rng(seed, name);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.mutable_data()) v = dist(rng);
}

// He initialisation for ReLU layers: N(0, 2 / fan_in).
inline void kaiming_init(Tensor& t, int fan_in, std::uint64_t seed, const std::string& name) {
  normal_init(t, std::sqrt(2.0 / fan_in), seed, name);
}

}  // namespace rundet::detail
