#pragma once

// Student-parameter optimization: Adam (default) or plain SGD, a linear
// warmup followed by linear or cosine decay to zero, and optional global
// gradient-norm clipping.
//
// The elementwise update arithmetic is pinned — same expression, same
// order, every call — because bitwise trajectory replay is part of the
// training contract.  Two identities follow from IEEE-754 power-of-two
// scaling and are locked in by tests:
//   SGD:  step(2g, lr/2)            == step(g, lr)        bitwise
//   Adam: step(2g, eps*2, same lr)  == step(g, eps)       bitwise
// The second holds because doubling every gradient exactly doubles m,
// quadruples v, and doubles sqrt(vhat), so the ratio is unchanged when eps
// is doubled with it.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mcr/params.hpp"
#include "mcr/util.hpp"

namespace mcr {

enum class OptimizerKind { kAdam, kSgd };
enum class LrDecay { kLinear, kCosine };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::kAdam ? "adam" : "sgd";
}
inline const char* to_string(LrDecay d) {
  return d == LrDecay::kLinear ? "linear" : "cosine";
}

struct OptimConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double grad_clip = 1.0;  // global-norm ceiling; <= 0 disables
  std::size_t warmup_updates = 200;
  std::size_t total_updates = 2000;
  LrDecay decay = LrDecay::kLinear;

  void validate() const {
    if (!(lr > 0.0)) fail_invalid("optim: lr ", lr, " must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail_invalid("optim: beta1 ", beta1, " not in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail_invalid("optim: beta2 ", beta2, " not in [0, 1)");
    if (!(eps > 0.0)) fail_invalid("optim: eps ", eps, " must be positive");
    if (total_updates == 0) fail_invalid("optim: total_updates must be positive");
  }
};

// Learning rate for a 0-based update index: linear ramp over the first
// `warmup` updates (hitting full lr on the last warmup step), then decay to
// zero at `total`.  Steps past `total` stay at zero.
inline double lr_at(double lr, std::size_t warmup, std::size_t total, LrDecay decay,
                    std::size_t update) {
  if (update >= total) return 0.0;
  if (update < warmup)
    return lr * static_cast<double>(update + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(total - warmup);
  const double into = static_cast<double>(update - warmup);
  if (decay == LrDecay::kLinear) return lr * (span - into) / span;
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * into / span));
}

// Per-step report, recorded into metrics.
struct OptimStepInfo {
  double lr = 0.0;
  double grad_norm = 0.0;   // pre-clip global norm
  bool clipped = false;
};

template <typename Real>
class Optimizer {
 public:
  OptimConfig cfg;

  Optimizer() = default;
  explicit Optimizer(OptimConfig c) : cfg(c) { cfg.validate(); }

  // Sizes the moment buffers against the store; zero moments, step 0.
  void attach(const ParamStore<Real>& params) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params.tensor(i).size(), Real(0));
      if (cfg.kind == OptimizerKind::kAdam)
        v_[i].assign(params.tensor(i).size(), Real(0));
    }
    t_ = 0;
    beta1_pow_ = 1.0;
    beta2_pow_ = 1.0;
  }

  std::uint64_t updates_applied() const { return t_; }

  // One optimization step against the gradients currently held by `params`.
  // A parameter with no gradient buffer contributes zeros (it still moves
  // under Adam once its moments are nonzero).
  OptimStepInfo step(ParamStore<Real>& params, std::size_t update_index) {
    if (m_.size() != params.size())
      fail_invalid("optim: attached to ", m_.size(), " tensors, store has ",
                   params.size());
    OptimStepInfo info;
    info.lr = lr_at(cfg.lr, cfg.warmup_updates, cfg.total_updates, cfg.decay,
                    update_index);

    // Global norm in double, accumulated in parameter order.
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params.tensor(i).has_grad()) continue;
      for (Real g : params.tensor(i).grad()) sq += static_cast<double>(g) * g;
    }
    info.grad_norm = std::sqrt(sq);
    Real clip_scale = Real(1);
    if (cfg.grad_clip > 0.0 && info.grad_norm > cfg.grad_clip) {
      clip_scale = static_cast<Real>(cfg.grad_clip / info.grad_norm);
      info.clipped = true;
    }

    t_ += 1;
    const Real lr = static_cast<Real>(info.lr);
    if (cfg.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < params.size(); ++i) apply_sgd(params, i, lr, clip_scale);
      return info;
    }

    beta1_pow_ *= cfg.beta1;
    beta2_pow_ *= cfg.beta2;
    const Real b1 = static_cast<Real>(cfg.beta1);
    const Real b2 = static_cast<Real>(cfg.beta2);
    const Real c1 = static_cast<Real>(1.0 - beta1_pow_);
    const Real c2 = static_cast<Real>(1.0 - beta2_pow_);
    const Real eps = static_cast<Real>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<Real>& p = params.tensor(i);
      const bool live = p.has_grad();
      std::vector<Real>& val = p.value_mut();
      std::vector<Real>& m = m_[i];
      std::vector<Real>& v = v_[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        const Real g = live ? p.grad()[j] * clip_scale : Real(0);
        m[j] = b1 * m[j] + (Real(1) - b1) * g;
        v[j] = b2 * v[j] + (Real(1) - b2) * (g * g);
        const Real mhat = m[j] / c1;
        const Real vhat = v[j] / c2;
        val[j] -= lr * (mhat / (std::sqrt(vhat) + eps));
      }
    }
    return info;
  }

  // Checkpoint surface: moments as named arrays plus the scalar state.
  std::size_t slots() const { return m_.size(); }
  const std::vector<Real>& moment1(std::size_t i) const { return m_[i]; }
  const std::vector<Real>& moment2(std::size_t i) const { return v_[i]; }
  std::vector<Real>& moment1_mut(std::size_t i) { return m_[i]; }
  std::vector<Real>& moment2_mut(std::size_t i) { return v_[i]; }
  double beta1_pow() const { return beta1_pow_; }
  double beta2_pow() const { return beta2_pow_; }
  void restore_scalars(std::uint64_t t, double b1p, double b2p) {
    t_ = t;
    beta1_pow_ = b1p;
    beta2_pow_ = b2p;
  }

 private:
  void apply_sgd(ParamStore<Real>& params, std::size_t i, Real lr, Real clip_scale) {
    Tensor<Real>& p = params.tensor(i);
    if (!p.has_grad()) return;  // zero gradient moves nothing under SGD
    std::vector<Real>& val = p.value_mut();
    for (std::size_t j = 0; j < val.size(); ++j)
      val[j] -= lr * (p.grad()[j] * clip_scale);
  }

  std::vector<std::vector<Real>> m_;
  std::vector<std::vector<Real>> v_;
  std::uint64_t t_ = 0;
  double beta1_pow_ = 1.0;  // beta1^t, tracked incrementally and checkpointed
  double beta2_pow_ = 1.0;
};

}  // namespace mcr
