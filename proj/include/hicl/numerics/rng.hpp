#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "hicl/numerics/ndarray.hpp"

namespace hicl {

// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
// Counter-based: the 128-bit counter is (block index, stream id) and the
// 64-bit key is the seed, so every (seed, stream) pair is an independent
// sequence and any position can be reached in O(1).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key);

inline constexpr const char* kRngAlgorithm = "philox4x32-10/v1";

struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t block = 0;  // next block to generate
  std::uint32_t lane = 4;   // next word within the buffered block; 4 = empty

  friend bool operator==(const RngState&, const RngState&) = default;
};

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);
  explicit RngStream(const RngState& state);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();
  // Uniform on the closed integer range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double rademacher() { return (next_u32() & 1u) ? 1.0 : -1.0; }

  RngState state() const;
  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  std::uint32_t lane_ = 4;
};

enum class Distribution {
  kStandardNormal,
  kUniformUnit,
  kRademacher,
  kUniformInt,
  kUniformSphere,
};

struct DistributionSpec {
  Distribution kind = Distribution::kStandardNormal;
  std::int64_t int_lo = 0;  // kUniformInt, inclusive
  std::int64_t int_hi = 0;
  double radius = 1.0;      // kUniformSphere; the sphere lives on the last axis
};

Distribution parse_distribution(const std::string& name);

NdArray<double> rng_draw(RngStream& rng, const DistributionSpec& dist,
                         const Shape& shape);

}  // namespace hicl
