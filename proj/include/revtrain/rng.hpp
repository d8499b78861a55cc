#pragma once

#include <cstdint>

namespace revtrain {

/// PCG-XSH-RR 32-bit generator (O'Neill, 2014).
///
/// State transition: state = state * 6364136223846793005 + (stream << 1 | 1),
/// output: rotr32(((state >> 18) ^ state) >> 27, state >> 59).
/// Seeding follows the reference pcg32_srandom_r procedure, so a given
/// (seed, stream) pair yields the same sequence on every platform.
class Pcg32 {
 public:
  using result_type = std::uint32_t;

  explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL,
                 std::uint64_t stream = 0xda3e39cb94b95bdbULL);

  std::uint32_t next_u32();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, bound) without modulo bias.
  std::uint32_t below(std::uint32_t bound);
  // Standard normal via the Box-Muller transform; the second variate of each
  // pair is cached.
  double normal();

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return 0xffffffffu; }
  result_type operator()() { return next_u32(); }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace revtrain
