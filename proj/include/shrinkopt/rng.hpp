#pragma once

#include <array>
#include <cstdint>

namespace shrinkopt {

/// Counter-based random stream built on Philox4x32-10.
///
/// The key is the 64-bit seed, the 128-bit counter block is (counter, stream_id),
/// so for a fixed seed every (stream_id, counter) pair maps to a distinct block.
/// Output is a pure function of (seed, stream_id, counter) plus the position
/// inside the current block.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  /// Raw Philox block for (seed, stream_id, counter); advances the counter.
  std::array<std::uint32_t, 4> next_block();

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1) with 53 random bits.
  double next_uniform();
  /// Standard normal via Box-Muller on two uniforms.
  double next_normal();
  /// Unbiased integer in [0, bound); bound must be positive.
  std::uint64_t next_below(std::uint64_t bound);

  /// Independent child stream identified by `tag` (same seed, hashed stream id).
  RngStream derive(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_normal_ = false;

  std::uint32_t next_u32();
};

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

}  // namespace shrinkopt
