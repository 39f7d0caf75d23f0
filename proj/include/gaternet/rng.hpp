#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace gaternet {

// Seeded pseudo-random stream. Every draw goes through the engine with a
// fresh distribution object, so the engine state alone determines the
// sequence and can be checkpointed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const;
  void set_state(const std::string& state);

  // Independent child stream derived from the current state and a tag.
  Rng split(std::uint64_t tag);

 private:
  std::mt19937_64 engine_;
};

}  // namespace gaternet
