#pragma once

#include <cstdint>
#include <string_view>

namespace morl {

// Counter-based deterministic generator. Draws are a pure function of
// (key, counter), so the full stream state serializes as two 64-bit words
// and independent substreams can be split off by name without perturbing
// the parent stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::string_view stream = "root");

  static Rng from_state(std::uint64_t key, std::uint64_t counter);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Standard normal via Box-Muller. Always consumes exactly two draws, so
  // the stream position stays a simple function of the call count.
  double normal();

  // Uniform integer in [0, n), n >= 1.
  std::uint32_t below(std::uint32_t n);

  // Independent child stream; does not advance this stream.
  Rng substream(std::string_view name) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace morl
