#pragma once

#include <cstdint>
#include <random>

#include "urcdm/tensor.hpp"

namespace urcdm {

// SplitMix64 finaliser; the building block for every derived seed.
std::uint64_t mix64(std::uint64_t x);

// Order-sensitive hash of a seed and a list of integers. Used for per-tile
// seeds: stable_hash(global_seed, {stage, i, j}).
std::uint64_t stable_hash(std::uint64_t seed, std::initializer_list<std::uint64_t> parts);

// Deterministic source of standard-normal and uniform draws. mt19937_64 is
// fully specified by the standard; the normal transform is our own
// Box-Muller so sequences do not depend on the library's distributions.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t seed) : engine_(seed) {}

  double uniform();                // [0,1)
  double normal();                 // N(0,1)
  std::uint64_t bits() { return engine_(); }
  std::uint64_t below(std::uint64_t n);  // uniform integer in [0,n)

  Tensor normal_like(const Shape& shape);
  void fill_normal(Tensor& t);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace urcdm
