#pragma once

// Exponential-moving-average teacher and regression-target construction.
//
// The teacher is a gradient-free copy of the tracked student parameters,
// updated after every optimizer step as  delta <- tau * delta + (1 - tau) *
// theta.  tau ramps linearly from tau0 to tau_end over tau_steps updates and
// stays at tau_end afterwards.  Targets are built from the deepest K teacher
// block outputs: each is standardized per frame over the feature dimension,
// then the K tensors are averaged.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mcr/params.hpp"
#include "mcr/tensor.hpp"
#include "mcr/util.hpp"

namespace mcr {

struct EmaSchedule {
  double tau0 = 0.999;
  double tau_end = 0.9999;
  std::int64_t tau_steps = 30000;
  bool track_feature_encoder = false;  // teacher owns waveform-encoder copies too

  void validate() const {
    if (!(tau0 >= 0.0 && tau0 <= 1.0)) fail_invalid("ema: tau0 ", tau0, " not in [0, 1]");
    if (!(tau_end >= 0.0 && tau_end <= 1.0))
      fail_invalid("ema: tau_end ", tau_end, " not in [0, 1]");
    if (tau0 > tau_end) fail_invalid("ema: tau0 ", tau0, " exceeds tau_end ", tau_end);
    if (tau_steps < 1) fail_invalid("ema: tau_steps must be at least 1");
  }
};

// tau for the update with 0-based index `update`; update 0 uses tau0 and the
// ramp reaches tau_end exactly at update == tau_steps.
inline double ema_tau_at(const EmaSchedule& s, std::int64_t update) {
  if (update >= s.tau_steps) return s.tau_end;
  if (update < 0) fail_invalid("ema: negative update index ", update);
  return s.tau0 + (s.tau_end - s.tau0) *
                      (static_cast<double>(update) / static_cast<double>(s.tau_steps));
}

// In-place EMA blend of every teacher entry against the student entry of the
// same name.  tau == 1 is an exact no-op and tau == 0 an exact copy, so those
// endpoints are bitwise clean.
template <typename Real>
void ema_update(ParamStore<Real>& teacher, const ParamStore<Real>& student, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) fail_invalid("ema: tau ", tau, " not in [0, 1]");
  std::string missing;
  for (std::size_t i = 0; i < teacher.size(); ++i)
    if (!student.has(teacher.name(i)))
      missing += missing.empty() ? teacher.name(i) : ", " + teacher.name(i);
  if (!missing.empty())
    fail_invalid("ema: teacher entries missing from student: ", missing);

  if (tau == 1.0) return;
  const Real t = static_cast<Real>(tau);
  const Real u = static_cast<Real>(1.0 - tau);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto& dst = teacher.tensor(i).value_mut();
    const auto& src = student.at(teacher.name(i)).value();
    if (src.size() != dst.size())
      fail_invalid("ema: shape drift on '", teacher.name(i), "'");
    if (tau == 0.0) {
      dst = src;
      continue;
    }
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = t * dst[j] + u * src[j];
  }
}

enum class TargetNorm { kInstance, kNone };

// Per-frame standardization over the feature dimension of a (T, d) tensor.
// Used on gradient-free teacher activations; the eps matches the encoder's
// layer norms.
template <typename Real>
Tensor<Real> instance_norm_frames(const Tensor<Real>& x, Real eps = Real(1e-5)) {
  if (x.rank() != 2)
    fail_invalid("instance_norm: expects (T, d), got ", shape_str(x.shape()));
  return layer_norm(x, std::size_t{1}, eps);
}

template <typename Real>
struct TargetRepresentation {
  Tensor<Real> y;      // (T, d), never requires grad
  std::size_t top_k;   // how many block outputs were averaged
};

// Average of the deepest `top_k` entries of `block_outputs` (ordered shallow
// to deep), each instance-normalized first when `norm` asks for it.
template <typename Real>
TargetRepresentation<Real> build_target(const std::vector<Tensor<Real>>& block_outputs,
                                        std::size_t top_k, TargetNorm norm) {
  if (block_outputs.empty()) fail_invalid("target: no block outputs");
  if (top_k < 1 || top_k > block_outputs.size())
    fail_invalid("target: top_k ", top_k, " invalid for ", block_outputs.size(),
                 " blocks");
  for (const auto& b : block_outputs)
    if (b.requires_grad())
      fail_invalid("target: teacher activations must be gradient-free");

  const std::size_t first = block_outputs.size() - top_k;
  auto normed = [&](const Tensor<Real>& b) {
    return norm == TargetNorm::kInstance ? instance_norm_frames(b) : b;
  };
  Tensor<Real> acc = normed(block_outputs[first]);
  for (std::size_t i = first + 1; i < block_outputs.size(); ++i)
    acc = add(acc, normed(block_outputs[i]));
  return {scale(acc, Real(1) / static_cast<Real>(top_k)), top_k};
}

}  // namespace mcr
