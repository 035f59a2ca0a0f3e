#pragma once

#include <cstdint>
#include <random>

#include "zca/tensor.hpp"

namespace zca {

// Explicit random stream. Every stochastic operation takes one of these by
// reference; there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return p > 0.0 && uniform() < p; }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::uint64_t next_u64() { return engine_(); }

  Tensor<double> normal_tensor(const Shape& shape) {
    Tensor<double> t(shape);
    for (auto& v : t.values()) v = normal();
    return t;
  }

  // Derives an independent child stream, e.g. one per sample.
  Rng split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace zca
