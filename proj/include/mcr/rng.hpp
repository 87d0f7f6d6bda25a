#pragma once

// Counter-based splittable random streams.
//
// A stream is an immutable (seed, stream_id) pair plus a draw counter.  The
// n-th draw is a pure hash of the triple, so any value can be recomputed from
// coordinates alone, and derive() spawns statistically independent child
// streams without touching the parent.  There is no global state: two runs
// that derive the same stream tree see bitwise-identical draws.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mcr {

namespace detail {

// Finalizer from splitmix64: bijective avalanche mix of one 64-bit word.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

// Order-dependent combine; chain(chain(a,b),c) separates permutations of the
// same coordinates.
constexpr std::uint64_t hash_chain(std::uint64_t h, std::uint64_t v) noexcept {
  return mix64((h + kGolden) ^ mix64(v + kGolden));
}

}  // namespace detail

// Compile-time FNV-1a of a label, used to salt derived streams by role so
// e.g. the mask stream and the dropout stream of the same step never collide.
constexpr std::uint64_t stream_tag(std::string_view label) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// One logical random stream.  Copyable; copies advance independently.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
  std::uint64_t counter = 0;

  static constexpr RngStream root(std::uint64_t seed) noexcept { return {seed, 0, 0}; }

  // Child stream with a fresh counter.  Pure: the parent is not advanced.
  [[nodiscard]] constexpr RngStream derive(std::uint64_t tag) const noexcept {
    return {seed, detail::hash_chain(stream_id, tag), 0};
  }
  [[nodiscard]] constexpr RngStream derive(std::string_view label) const noexcept {
    return derive(stream_tag(label));
  }

  constexpr std::uint64_t next_u64() noexcept {
    const std::uint64_t h =
        detail::hash_chain(detail::hash_chain(seed, stream_id), counter);
    ++counter;
    return h;
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double next_double() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // True with probability p.  Always consumes exactly one draw, including for
  // p <= 0 and p >= 1, so call sites stay aligned across parameter sweeps.
  bool next_bernoulli(double p) noexcept { return next_double() < p; }

  // Standard normal, Box-Muller cosine branch: exactly two draws per call.
  double next_normal() noexcept {
    const double u1 = 1.0 - next_double();  // (0, 1]; keeps the log finite
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n), n > 0.  Modulo bias is negligible for any
  // desk-scale n (below 2^24).
  std::uint64_t next_index(std::uint64_t n) noexcept { return next_u64() % n; }
};

constexpr bool operator==(const RngStream& a, const RngStream& b) noexcept {
  return a.seed == b.seed && a.stream_id == b.stream_id && a.counter == b.counter;
}

}  // namespace mcr
