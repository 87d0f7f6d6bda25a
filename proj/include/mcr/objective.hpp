#pragma once

// Masked-prediction objective with a model-level consistency term.
//
// Given the target y (masked rows only, gradient-free) and the two student
// predictions f1, f2 for the same view:
//     pred1 = mean((y - f1)^2)          pred2 = mean((y - f2)^2)
//     pred  = pred1 + pred2
//     mcr   = mean((f1 - f2)^2)
//     total = pred + lambda * mcr
// All reductions are means over the same masked elements in the same order,
// so pred1 and pred2 of identical predictions are bitwise equal.

#include <cstddef>

#include "mcr/tensor.hpp"
#include "mcr/util.hpp"

namespace mcr {

// Which prediction branch the consistency term treats as a constant.
enum class McrStopGrad { kNone, kF1, kF2 };

inline const char* to_string(McrStopGrad s) {
  switch (s) {
    case McrStopGrad::kNone: return "none";
    case McrStopGrad::kF1: return "f1";
    case McrStopGrad::kF2: return "f2";
  }
  return "?";
}

template <typename Real>
struct LossBundle {
  Tensor<Real> pred1, pred2, pred, mcr, total;
};

namespace detail {

template <typename Real>
void check_objective_inputs(const Tensor<Real>& y, const Tensor<Real>& f,
                            const char* which) {
  if (y.shape() != f.shape())
    fail_invalid("objective: target ", shape_str(y.shape()), " vs ", which, " ",
                 shape_str(f.shape()));
  if (y.requires_grad())
    fail_invalid("objective: target must be gradient-free (detach the teacher)");
  if (y.size() == 0) fail_invalid("objective: empty masked set");
}

}  // namespace detail

// Dual-pass objective.  With lambda == 0 the consistency value is still
// reported for metrics, but computed outside the graph: total aliases pred
// and backward never touches the f1-f2 branch.
template <typename Real>
LossBundle<Real> mcr_objective(const Tensor<Real>& y, const Tensor<Real>& f1,
                               const Tensor<Real>& f2, double lambda,
                               McrStopGrad stop_grad = McrStopGrad::kNone) {
  detail::check_objective_inputs(y, f1, "f1");
  detail::check_objective_inputs(y, f2, "f2");
  if (!(lambda >= 0.0)) fail_invalid("objective: lambda ", lambda, " must be >= 0");

  LossBundle<Real> out;
  out.pred1 = mean(square(sub(y, f1)));
  out.pred2 = mean(square(sub(y, f2)));
  out.pred = add(out.pred1, out.pred2);
  if (lambda == 0.0) {
    out.mcr = mean(square(sub(f1.detach(), f2.detach())));
    out.total = out.pred;
    return out;
  }
  const Tensor<Real> a = stop_grad == McrStopGrad::kF1 ? f1.detach() : f1;
  const Tensor<Real> b = stop_grad == McrStopGrad::kF2 ? f2.detach() : f2;
  out.mcr = mean(square(sub(a, b)));
  out.total = add(out.pred, scale(out.mcr, static_cast<Real>(lambda)));
  return out;
}

// Single-pass objective for the ablation mode: no second pass, no
// consistency term.  pred and total alias pred1; pred2 and mcr are exact
// zeros so metrics keep a uniform schema.
template <typename Real>
LossBundle<Real> baseline_objective(const Tensor<Real>& y, const Tensor<Real>& f1) {
  detail::check_objective_inputs(y, f1, "f1");
  LossBundle<Real> out;
  out.pred1 = mean(square(sub(y, f1)));
  out.pred2 = Tensor<Real>::scalar(Real(0));
  out.pred = out.pred1;
  out.mcr = Tensor<Real>::scalar(Real(0));
  out.total = out.pred1;
  return out;
}

}  // namespace mcr
