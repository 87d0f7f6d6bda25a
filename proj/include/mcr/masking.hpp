#pragma once

// Span masking over frame sequences.
//
// A mask is built by drawing an independent Bernoulli(mask_prob) "span start"
// at every frame and unioning spans of span_len frames (clipped at the end of
// the sequence).  A draw that violates the minimum masked/unmasked counts is
// redrawn up to 8 times; after that a deterministic centered single span is
// used, so sampling always terminates with a valid view.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mcr/rng.hpp"
#include "mcr/util.hpp"

namespace mcr {

struct MaskPolicy {
  double mask_prob = 0.15;     // per-frame span start probability
  std::size_t span_len = 5;    // frames per span
  std::size_t views = 4;       // masked views drawn per sample
  std::size_t min_masked = 1;  // validity floor for masked frames
  std::size_t min_unmasked = 1;

  void validate() const {
    if (!(mask_prob >= 0.0 && mask_prob < 1.0))
      fail_invalid("mask policy: mask_prob ", mask_prob, " not in [0, 1)");
    if (span_len == 0) fail_invalid("mask policy: span_len must be positive");
    if (views == 0) fail_invalid("mask policy: views must be positive");
    if (min_masked == 0 || min_unmasked == 0)
      fail_invalid("mask policy: minimum counts must be positive");
  }
};

struct MaskedView {
  std::vector<std::uint8_t> mask;        // mask[t] == 1 -> frame t is masked
  std::vector<std::size_t> masked_idx;   // ascending
  std::vector<std::size_t> unmasked_idx; // ascending
};

namespace detail {

inline MaskedView view_from_mask(std::vector<std::uint8_t> mask) {
  MaskedView v;
  v.mask = std::move(mask);
  for (std::size_t t = 0; t < v.mask.size(); ++t)
    (v.mask[t] ? v.masked_idx : v.unmasked_idx).push_back(t);
  return v;
}

}  // namespace detail

// One mask over `frames` positions.  Consumes `frames` draws per attempt.
inline MaskedView sample_mask(std::size_t frames, const MaskPolicy& policy,
                              RngStream& rng) {
  policy.validate();
  if (frames < policy.min_masked + policy.min_unmasked)
    fail_invalid("sample_mask: ", frames, " frames cannot satisfy minimums ",
                 policy.min_masked, "+", policy.min_unmasked);

  constexpr int kRedraws = 8;
  for (int attempt = 0; attempt <= kRedraws; ++attempt) {
    std::vector<std::uint8_t> mask(frames, 0);
    std::size_t masked = 0;
    std::size_t covered_until = 0;  // exclusive end of the union of spans
    for (std::size_t t = 0; t < frames; ++t) {
      if (rng.next_bernoulli(policy.mask_prob)) {
        const std::size_t end = std::min(frames, t + policy.span_len);
        if (end > covered_until) covered_until = end;
      }
      if (t < covered_until) {
        mask[t] = 1;
        ++masked;
      }
    }
    if (masked >= policy.min_masked && frames - masked >= policy.min_unmasked)
      return detail::view_from_mask(std::move(mask));
  }

  // Deterministic fallback: one centered span, clamped so both minimum
  // counts hold.
  std::size_t len = policy.span_len;
  len = std::max(len, policy.min_masked);
  len = std::min(len, frames - policy.min_unmasked);
  const std::size_t start = (frames - len) / 2;
  std::vector<std::uint8_t> mask(frames, 0);
  for (std::size_t t = start; t < start + len; ++t) mask[t] = 1;
  return detail::view_from_mask(std::move(mask));
}

// The M views of one sample.  View i draws from the child stream derive(i),
// so views are independent and individually replayable.
inline std::vector<MaskedView> sample_views(std::size_t frames,
                                            const MaskPolicy& policy,
                                            const RngStream& rng) {
  std::vector<MaskedView> views;
  views.reserve(policy.views);
  for (std::size_t v = 0; v < policy.views; ++v) {
    RngStream vs = rng.derive(v);
    views.push_back(sample_mask(frames, policy, vs));
  }
  return views;
}

// Closed-form expected masked fraction under this policy (before the
// validity redraw, whose effect is negligible for desk-scale shapes): frame t
// is unmasked iff none of its min(span_len, t+1) potential span starts fired.
inline double expected_masked_fraction(std::size_t frames, const MaskPolicy& p) {
  const double q = 1.0 - p.mask_prob;
  double acc = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t starts = std::min(p.span_len, t + 1);
    acc += 1.0 - std::pow(q, static_cast<double>(starts));
  }
  return acc / static_cast<double>(frames);
}

}  // namespace mcr
