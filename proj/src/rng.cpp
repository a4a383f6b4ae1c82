#include "disparity/rng.hpp"

#include <cmath>
#include <numbers>

namespace disparity {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_text(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t derive_key(std::uint64_t parent, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(parent) ^ splitmix64(index * kGolden + 0x632BE59BD9B4E019ULL));
}

std::uint64_t derive_key(std::uint64_t parent, std::string_view tag) noexcept {
  return derive_key(parent, hash_text(tag));
}

Stream::result_type Stream::operator()() noexcept {
  const std::uint64_t out = splitmix64(key_ + counter_ * kGolden);
  ++counter_;
  return out;
}

double Stream::uniform() noexcept {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double Stream::normal() noexcept {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Stream::below(std::uint64_t n) noexcept {
  // Lemire's multiply-shift; the bias for n << 2^64 is negligible and the
  // draw count per call stays fixed at one.
  const unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
  return static_cast<std::uint64_t>(m >> 64);
}

}  // namespace disparity
