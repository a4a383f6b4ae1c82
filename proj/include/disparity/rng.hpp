#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace disparity {

// Counter-based random streams.
//
// Every stochastic quantity is drawn from a stream identified by a 64-bit
// key. Keys are derived from the master seed by hashing a tag and one or
// more indices (replicate, chain, loan, ...), so results never depend on
// scheduling or thread count. Within a stream, the n-th output is
// splitmix64(key + n * golden), which makes streams cheap to create.

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// FNV-1a over the bytes of `text`.
std::uint64_t hash_text(std::string_view text) noexcept;

// Combine a parent key with a child index into a new, decorrelated key.
std::uint64_t derive_key(std::uint64_t parent, std::uint64_t index) noexcept;
std::uint64_t derive_key(std::uint64_t parent, std::string_view tag) noexcept;

class Stream {
 public:
  using result_type = std::uint64_t;

  explicit Stream(std::uint64_t key) noexcept : key_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept;

  // Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Standard normal via Box-Muller (one draw per call; the pair partner is discarded
  // so the stream position depends only on the number of calls).
  double normal() noexcept;
  // Index uniformly in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t position() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace disparity
