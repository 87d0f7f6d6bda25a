#pragma once

// Finite-difference verification of recorded gradients.
//
// Each case builds a scalar loss from a set of input tensors.  The recorded
// (analytic) gradient of every probed input element is compared against the
// central difference (f(x+h) - f(x-h)) / (2h), evaluated in double precision,
// and the case reports its worst relative error
//     |a - n| / max(|a|, |n|, 1e-8).
// Cases must be pure functions of the input values: any randomness (dropout
// masks, scalarization weights) is frozen into the case closure when the
// registry is built, so the two FD evaluations see identical code paths.

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mcr/rng.hpp"
#include "mcr/tensor.hpp"
#include "mcr/util.hpp"

namespace mcr {

struct GradcheckSettings {
  double step = 1e-5;                  // central-difference half-width
  std::size_t max_probes_per_input = 32;  // FD probes per input tensor
};

struct GradcheckCase {
  std::string name;
  std::vector<Shape> input_shapes;
  // Maps input tensors to a scalar loss.  Called with params for the analytic
  // pass and with perturbed constants for the FD passes.
  std::function<TensorD(const std::vector<TensorD>&)> build;
};

struct GradcheckReport {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t probes = 0;
};

// Reduce an arbitrary tensor to a scalar through a fixed random weighting, so
// every output element influences the loss.  The rng is taken by value: each
// call regenerates the same weights.
inline TensorD scalarize(const TensorD& y, RngStream rng) {
  std::vector<double> w(y.size());
  for (auto& v : w) v = rng.next_normal();
  return sum(mul(y, TensorD::constant(y.shape(), std::move(w))));
}

inline GradcheckReport gradcheck_case(const GradcheckCase& c, RngStream rng,
                                      const GradcheckSettings& st = {}) {
  // Base point: standard-normal draws per input.
  std::vector<std::vector<double>> base(c.input_shapes.size());
  {
    RngStream vals = rng.derive("values");
    for (std::size_t i = 0; i < base.size(); ++i) {
      base[i].resize(shape_numel(c.input_shapes[i]));
      for (auto& v : base[i]) v = vals.next_normal();
    }
  }

  // Analytic pass.
  std::vector<TensorD> params;
  params.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i)
    params.push_back(TensorD::param(c.input_shapes[i], base[i]));
  TensorD loss = c.build(params);
  if (loss.size() != 1)
    fail_invalid("gradcheck: case '", c.name, "' did not produce a scalar");
  backward(loss);

  auto eval_at = [&](std::size_t which, std::size_t elem, double v) {
    std::vector<TensorD> xs;
    xs.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      std::vector<double> vals = base[i];
      if (i == which) vals[elem] = v;
      xs.push_back(TensorD::constant(c.input_shapes[i], std::move(vals)));
    }
    return c.build(xs).item();
  };

  GradcheckReport rep{c.name, 0.0, 0};
  RngStream probe_rng = rng.derive("probes");
  for (std::size_t i = 0; i < base.size(); ++i) {
    const std::size_t n = base[i].size();
    // Probe everything when small; otherwise a deterministic subsample.
    std::vector<std::size_t> probes;
    if (n <= st.max_probes_per_input) {
      probes.resize(n);
      for (std::size_t e = 0; e < n; ++e) probes[e] = e;
    } else {
      for (std::size_t e = 0; e < st.max_probes_per_input; ++e)
        probes.push_back(probe_rng.next_index(n));
    }
    const std::vector<double>* grads =
        params[i].has_grad() ? &params[i].grad() : nullptr;
    for (std::size_t e : probes) {
      const double a = grads ? (*grads)[e] : 0.0;
      const double fp = eval_at(i, e, base[i][e] + st.step);
      const double fm = eval_at(i, e, base[i][e] - st.step);
      const double num = (fp - fm) / (2.0 * st.step);
      const double rel =
          std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.probes;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// registry: every differentiable op plus representative compositions
// ---------------------------------------------------------------------------

inline std::vector<GradcheckCase> gradcheck_registry(std::uint64_t seed = 17) {
  const RngStream root = RngStream::root(seed);
  std::vector<GradcheckCase> cases;
  auto emit = [&](std::string name, std::vector<Shape> shapes,
                  std::function<TensorD(const std::vector<TensorD>&)> fn) {
    cases.push_back({std::move(name), std::move(shapes), std::move(fn)});
  };
  auto w_rng = [&](const char* name) { return root.derive("scalarize").derive(name); };

  emit("add", {{3, 4}, {3, 4}},
       [r = w_rng("add")](const auto& x) { return scalarize(add(x[0], x[1]), r); });
  emit("add_broadcast_row", {{3, 4}, {4}},
       [r = w_rng("add_b")](const auto& x) { return scalarize(add(x[0], x[1]), r); });
  emit("add_broadcast_scalar", {{3, 4}, {}},
       [r = w_rng("add_s")](const auto& x) { return scalarize(add(x[1], x[0]), r); });
  emit("sub", {{2, 5}, {5}},
       [r = w_rng("sub")](const auto& x) { return scalarize(sub(x[0], x[1]), r); });
  emit("mul", {{3, 4}, {3, 4}},
       [r = w_rng("mul")](const auto& x) { return scalarize(mul(x[0], x[1]), r); });
  emit("mul_broadcast", {{2, 3, 4}, {4}},
       [r = w_rng("mul_b")](const auto& x) { return scalarize(mul(x[0], x[1]), r); });
  emit("scale", {{3, 4}},
       [r = w_rng("scale")](const auto& x) { return scalarize(scale(x[0], -1.7), r); });
  emit("identity", {{3, 4}},
       [r = w_rng("identity")](const auto& x) {
         // consume the copy twice so the pass-through grad accumulates
         return scalarize(add(identity(x[0]), identity(x[0])), r);
       });
  emit("matmul", {{3, 4}, {4, 5}},
       [r = w_rng("matmul")](const auto& x) { return scalarize(matmul(x[0], x[1]), r); });
  emit("transpose", {{3, 5}},
       [r = w_rng("transpose")](const auto& x) { return scalarize(transpose(x[0]), r); });
  emit("reshape", {{3, 4}},
       [r = w_rng("reshape")](const auto& x) {
         return scalarize(reshape(x[0], {2, 6}), r);
       });
  emit("concat_axis0", {{2, 3}, {4, 3}},
       [r = w_rng("cat0")](const auto& x) {
         return scalarize(concat<double>({x[0], x[1]}, 0), r);
       });
  emit("concat_axis1", {{3, 2}, {3, 4}},
       [r = w_rng("cat1")](const auto& x) {
         return scalarize(concat<double>({x[0], x[1]}, 1), r);
       });
  emit("slice_axis0", {{5, 3}},
       [r = w_rng("sl0")](const auto& x) { return scalarize(slice(x[0], 0, 1, 4), r); });
  emit("slice_axis1", {{3, 6}},
       [r = w_rng("sl1")](const auto& x) { return scalarize(slice(x[0], 1, 2, 5), r); });
  emit("sum", {{3, 4}}, [](const auto& x) { return sum(x[0]); });
  emit("mean", {{3, 4}}, [](const auto& x) { return mean(x[0]); });
  emit("sum_axis", {{3, 4}},
       [r = w_rng("suma")](const auto& x) { return scalarize(sum_axis(x[0], 1), r); });
  emit("mean_axis", {{3, 4}},
       [r = w_rng("meana")](const auto& x) { return scalarize(mean_axis(x[0], 0), r); });
  emit("square", {{3, 4}},
       [r = w_rng("sq")](const auto& x) { return scalarize(square(x[0]), r); });
  emit("sqrt", {{3, 4}},
       [r = w_rng("sqrt")](const auto& x) {
         // shift into the strictly positive domain before taking the root
         return scalarize(sqrt(add_scalar(square(x[0]), 0.5)), r);
       });
  emit("exp", {{3, 4}},
       [r = w_rng("exp")](const auto& x) { return scalarize(exp(x[0]), r); });
  emit("log", {{3, 4}},
       [r = w_rng("log")](const auto& x) {
         return scalarize(log(add_scalar(square(x[0]), 0.5)), r);
       });
  emit("softmax_axis1", {{3, 4}},
       [r = w_rng("sm1")](const auto& x) { return scalarize(softmax(x[0], 1), r); });
  emit("softmax_axis0", {{4, 3}},
       [r = w_rng("sm0")](const auto& x) { return scalarize(softmax(x[0], 0), r); });
  emit("gelu", {{3, 4}},
       [r = w_rng("gelu")](const auto& x) { return scalarize(gelu(x[0]), r); });
  emit("layer_norm", {{3, 8}},
       [r = w_rng("ln")](const auto& x) {
         return scalarize(layer_norm(x[0], std::size_t{1}, 1e-5), r);
       });
  emit("layer_norm_axis0", {{6, 2}},
       [r = w_rng("ln0")](const auto& x) {
         return scalarize(layer_norm(x[0], std::size_t{0}, 1e-5), r);
       });
  {
    // Fixed dropout mask, frozen at registry construction.
    RngStream mask_rng = root.derive("dropout_mask");
    std::vector<std::uint8_t> keep(3 * 4);
    for (auto& k : keep) k = mask_rng.next_bernoulli(0.3) ? 0 : 1;
    emit("dropout_mask", {{3, 4}},
         [r = w_rng("do"), keep](const auto& x) {
           return scalarize(apply_dropout_mask(x[0], keep, 0.3), r);
         });
  }
  emit("conv1d_strided", {{7, 3}, {4, 3, 3}, {4}},
       [r = w_rng("conv_s")](const auto& x) {
         return scalarize(conv1d(x[0], x[1], x[2], 2, 1, 0), r);
       });
  emit("conv1d_same", {{6, 2}, {5, 3, 2}, {5}},
       [r = w_rng("conv_p")](const auto& x) {
         return scalarize(conv1d(x[0], x[1], x[2], 1, 1, 1), r);
       });
  emit("gather_rows", {{5, 3}},
       [r = w_rng("gr")](const auto& x) {
         return scalarize(gather_rows(x[0], {0, 2, 2, 4}), r);
       });
  emit("scatter_rows", {{3, 4}, {4}},
       [r = w_rng("sr")](const auto& x) {
         return scalarize(scatter_rows(x[0], {1, 3, 4}, 6, x[1]), r);
       });
  emit("cross_entropy", {{4, 3}},
       [](const auto& x) { return cross_entropy(x[0], {0, 2, 1, 2}); });
  emit("weighted_sum", {{3, 4}, {3, 4}, {3, 4}, {3}},
       [r = w_rng("ws")](const auto& x) {
         return scalarize(weighted_sum({x[0], x[1], x[2]}, softmax(x[3], 0)), r);
       });

  // Composites that exercise the same op chains the encoder uses.
  emit("attention_head", {{5, 6}, {6, 6}, {6, 6}, {6, 6}},
       [r = w_rng("attn")](const auto& x) {
         TensorD q = matmul(x[0], x[1]);
         TensorD k = matmul(x[0], x[2]);
         TensorD v = matmul(x[0], x[3]);
         TensorD scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(6.0));
         return scalarize(matmul(softmax(scores, 1), v), r);
       });
  emit("ffn_block", {{4, 6}, {6, 12}, {12}, {12, 6}, {6}},
       [r = w_rng("ffn")](const auto& x) {
         TensorD h = gelu(add(matmul(x[0], x[1]), x[2]));
         TensorD y = add(matmul(h, x[3]), x[4]);
         return scalarize(add(x[0], y), r);
       });
  {
    // Two predictions against a fixed target: both squared-error terms plus
    // the prediction-agreement penalty, summed like the training objective.
    RngStream t_rng = root.derive("target");
    std::vector<double> tv(4 * 3);
    for (auto& v : tv) v = t_rng.next_normal();
    emit("masked_objective", {{4, 3}, {4, 3}},
         [tv](const auto& x) {
           TensorD y = TensorD::constant({4, 3}, tv);
           TensorD l1 = mean(square(sub(y, x[0])));
           TensorD l2 = mean(square(sub(y, x[1])));
           TensorD lc = mean(square(sub(x[0], x[1])));
           return add(add(l1, l2), lc);
         });
  }
  return cases;
}

// Runs `cases` and returns one report per case, in order.
inline std::vector<GradcheckReport> run_gradcheck(
    const std::vector<GradcheckCase>& cases, std::uint64_t seed = 23,
    const GradcheckSettings& st = {}) {
  std::vector<GradcheckReport> out;
  out.reserve(cases.size());
  const RngStream root = RngStream::root(seed);
  for (const auto& c : cases)
    out.push_back(gradcheck_case(c, root.derive(c.name), st));
  return out;
}

}  // namespace mcr
