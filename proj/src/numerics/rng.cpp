#include "hicl/numerics/rng.hpp"

#include <cmath>
#include <numbers>

namespace hicl {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream) {}

RngStream::RngStream(const RngState& state)
    : seed_(state.seed), stream_(state.stream), block_(state.block) {
  if (state.lane < 4) {
    // The buffered block was generated from block - 1.
    --block_;
    refill();
    lane_ = state.lane;
  }
}

void RngStream::refill() {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
      static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                            static_cast<std::uint32_t>(seed_ >> 32)};
  buffer_ = philox4x32_10(ctr, key);
  ++block_;
  lane_ = 0;
}

std::uint32_t RngStream::next_u32() {
  if (lane_ >= 4) refill();
  return buffer_[lane_++];
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t lo = next_u32();
  const std::uint64_t hi = next_u32();
  return (hi << 32) | lo;
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t RngStream::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw Error("uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return lo + static_cast<std::int64_t>(r % span);
}

RngState RngStream::state() const { return {seed_, stream_, block_, lane_}; }

Distribution parse_distribution(const std::string& name) {
  if (name == "standard-normal") return Distribution::kStandardNormal;
  if (name == "uniform-unit-interval") return Distribution::kUniformUnit;
  if (name == "rademacher") return Distribution::kRademacher;
  if (name == "uniform-integer-range") return Distribution::kUniformInt;
  if (name == "uniform-on-sphere") return Distribution::kUniformSphere;
  throw Error("unknown distribution '" + name + "'");
}

NdArray<double> rng_draw(RngStream& rng, const DistributionSpec& dist,
                         const Shape& shape) {
  NdArray<double> out(shape);
  auto data = out.data();
  switch (dist.kind) {
    case Distribution::kStandardNormal:
      for (double& v : data) v = rng.normal();
      break;
    case Distribution::kUniformUnit:
      for (double& v : data) v = rng.uniform();
      break;
    case Distribution::kRademacher:
      for (double& v : data) v = rng.rademacher();
      break;
    case Distribution::kUniformInt:
      for (double& v : data) {
        v = static_cast<double>(rng.uniform_int(dist.int_lo, dist.int_hi));
      }
      break;
    case Distribution::kUniformSphere: {
      if (shape.empty() || shape.back() == 0) {
        throw ShapeError("uniform-on-sphere needs a non-empty last axis");
      }
      const std::size_t d = shape.back();
      for (std::size_t row = 0; row < data.size(); row += d) {
        double norm2 = 0.0;
        do {
          norm2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            data[row + j] = rng.normal();
            norm2 += data[row + j] * data[row + j];
          }
        } while (norm2 == 0.0);
        const double scale = dist.radius / std::sqrt(norm2);
        for (std::size_t j = 0; j < d; ++j) data[row + j] *= scale;
      }
      break;
    }
    default:
      throw Error("unknown distribution");
  }
  return out;
}

}  // namespace hicl
