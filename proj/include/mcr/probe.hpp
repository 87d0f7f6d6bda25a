// mcr/probe.hpp — frozen-upstream downstream probe.
//
// Evaluates a pre-trained encoder the way lightweight benchmark suites do:
// every upstream parameter is frozen, the probe learns only a softmax
// mixture over the per-layer hidden states plus a single linear head.  Two
// toy tasks ship with the synthetic corpus: utterance-level tone-class
// classification and frame-level voiced/unvoiced labeling.  The learned
// mixture weights are the analysis artifact — a task that draws on layer k
// puts its mass there — and export_weight_analysis writes them (plus their
// entropy, a dispersion diagnostic) as JSON.
//
// The upstream runs once per clip in inference mode (full model, no dropout,
// no LayerDrop) and the resulting hidden states are detached, so probe
// training cannot touch or even reach an upstream parameter.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcr/config.hpp"
#include "mcr/data.hpp"
#include "mcr/model.hpp"
#include "mcr/optimizer.hpp"
#include "mcr/rng.hpp"
#include "mcr/tensor.hpp"
#include "mcr/trainer.hpp"
#include "mcr/util.hpp"

namespace mcr {

// ---------------------------------------------------------------------------
// layer weights
// ---------------------------------------------------------------------------

// Learned per-layer mixture: raw logits and their softmax.  The weights are
// nonnegative and sum to 1 within 1e-6 by construction; validate() re-checks
// both, since exported analyses are only meaningful under those invariants.
template <typename Real>
struct LayerWeights {
  std::vector<Real> logits;
  std::vector<Real> weights;  // softmax(logits)

  void validate() const {
    if (weights.size() != logits.size())
      fail_invalid("layer weights: ", logits.size(), " logits vs ", weights.size(),
                   " weights");
    if (weights.empty()) fail_invalid("layer weights: empty");
    double total = 0.0;
    for (Real w : weights) {
      if (!(w >= Real(0))) fail_invalid("layer weights: negative weight ", w);
      total += static_cast<double>(w);
    }
    if (std::abs(total - 1.0) > 1e-6)
      fail_invalid("layer weights: sum ", total, " is not 1 within 1e-6");
  }
};

template <typename Real>
LayerWeights<Real> make_layer_weights(std::vector<Real> logits) {
  if (logits.empty()) fail_invalid("layer weights: empty");
  Tensor<Real> t = Tensor<Real>::constant(Shape{logits.size()}, logits);
  LayerWeights<Real> lw;
  lw.weights = softmax(t, 0).value();
  lw.logits = std::move(logits);
  lw.validate();
  return lw;
}

// Mixture with fixed (already-softmaxed) weights; the learnable-path overload
// taking a weight tensor lives with the other tensor ops.
template <typename Real>
Tensor<Real> weighted_sum(const std::vector<Tensor<Real>>& h, const LayerWeights<Real>& w) {
  w.validate();
  return weighted_sum(h, Tensor<Real>::constant(Shape{w.weights.size()}, w.weights));
}

// ---------------------------------------------------------------------------
// probe tasks
// ---------------------------------------------------------------------------

enum class ProbeTaskKind { kUtteranceClass, kFrameLabel };

inline const char* to_string(ProbeTaskKind k) {
  return k == ProbeTaskKind::kUtteranceClass ? "utterance-classification"
                                             : "frame-labeling";
}

template <typename Real>
struct ProbeResult {
  double accuracy = 0.0;  // held-out
  LayerWeights<Real> weights;
  std::vector<MetricsRecord> history;  // one record per epoch, trainer schema
};

namespace detail {

// One clip, upstream already applied: detached per-layer hidden states and
// the task's integer labels (one for the whole clip, or one per frame).
template <typename Real>
struct ProbeExample {
  std::vector<Tensor<Real>> layers;
  std::vector<std::size_t> labels;
};

template <typename Real>
Tensor<Real> probe_logits(const ProbeExample<Real>& ex, const Tensor<Real>& mix_w,
                          const Tensor<Real>& head_w, const Tensor<Real>& head_b,
                          bool pool) {
  Tensor<Real> mix = weighted_sum(ex.layers, mix_w);
  if (pool) mix = reshape(mean_axis(mix, 0), Shape{1, mix.shape()[1]});
  return add(matmul(mix, head_w), head_b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// probe training
// ---------------------------------------------------------------------------

// Trains the mixture logits and the linear head against a frozen upstream;
// returns held-out accuracy, the final layer weights, and per-epoch loss
// records in the trainer's metrics schema (consistency and EMA fields stay
// zero — the probe has neither).  Full-batch Adam with the trainer's linear
// lr decay over `spec.epochs` steps.
template <typename Real>
ProbeResult<Real> probe_train(const ParamStore<Real>& upstream, const ModelConfig& mcfg,
                              ProbeTaskKind kind, const std::vector<Clip<Real>>& clips,
                              std::size_t n_classes, const ProbeSpec& spec) {
  if (clips.empty()) fail_invalid("probe: dataset is empty");
  if (n_classes < 2) fail_invalid("probe: need at least 2 classes, got ", n_classes);
  if (spec.epochs == 0) fail_invalid("probe: epochs must be positive");

  // Frozen upstream pass, once per clip.  Everything downstream sees only
  // detached values, so no gradient path into `upstream` exists at all.
  std::vector<detail::ProbeExample<Real>> examples;
  examples.reserve(clips.size());
  for (const Clip<Real>& clip : clips) {
    Tensor<Real> frames = Model<Real>::feature_encode_with(upstream, mcfg, clip.samples);
    std::vector<Tensor<Real>> blocks = Model<Real>::encode_blocks(upstream, mcfg, frames);
    detail::ProbeExample<Real> ex;
    if (spec.include_layer0) ex.layers.push_back(frames.detach());
    for (const Tensor<Real>& b : blocks) ex.layers.push_back(b.detach());
    if (kind == ProbeTaskKind::kUtteranceClass) {
      if (clip.tone_class >= n_classes)
        fail_invalid("probe: tone class ", clip.tone_class, " out of range for ",
                     n_classes, " classes");
      ex.labels = {clip.tone_class};
    } else {
      if (clip.voiced.size() != frames.shape()[0])
        fail_invalid("probe: ", clip.voiced.size(), " frame labels for ",
                     frames.shape()[0], " frames");
      ex.labels.reserve(clip.voiced.size());
      for (std::uint8_t v : clip.voiced) ex.labels.push_back(v ? 1 : 0);
    }
    examples.push_back(std::move(ex));
  }

  // Deterministic split: shuffle clip order with the probe seed, put the
  // first train_fraction of it into the training set.
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RngStream split = RngStream::root(spec.seed).derive("probe-split");
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split.next_index(i)]);
  const std::size_t n_train = std::max<std::size_t>(
      1, static_cast<std::size_t>(spec.train_fraction * static_cast<double>(order.size())));
  if (n_train >= order.size())
    fail_invalid("probe: ", order.size(), " clips leave no held-out split at fraction ",
                 spec.train_fraction);

  // Trainable parameters: mixture logits (uniform start) + linear head.
  const std::size_t n_layers = examples[0].layers.size();
  const std::size_t d = mcfg.d_model;
  RngStream hr = RngStream::root(spec.seed).derive("probe-head");
  std::vector<Real> wv(d * n_classes);
  const double head_scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : wv) v = static_cast<Real>(head_scale * hr.next_normal());
  ParamStore<Real> pstore;
  pstore.add("probe.logits",
             Tensor<Real>::param(Shape{n_layers}, std::vector<Real>(n_layers, Real(0))));
  pstore.add("probe.head.w", Tensor<Real>::param(Shape{d, n_classes}, wv));
  pstore.add("probe.head.b",
             Tensor<Real>::param(Shape{n_classes}, std::vector<Real>(n_classes, Real(0))));
  const Tensor<Real> mix_logits = pstore.at("probe.logits");
  const Tensor<Real> head_w = pstore.at("probe.head.w");
  const Tensor<Real> head_b = pstore.at("probe.head.b");

  OptimConfig ocfg;
  ocfg.kind = OptimizerKind::kAdam;
  ocfg.lr = spec.lr;
  ocfg.grad_clip = 0.0;
  ocfg.warmup_updates = 0;
  ocfg.total_updates = spec.epochs;
  Optimizer<Real> opt(ocfg);
  opt.attach(pstore);

  const bool pool = kind == ProbeTaskKind::kUtteranceClass;
  ProbeResult<Real> result;
  result.history.reserve(spec.epochs);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    Tensor<Real> mix_w = softmax(mix_logits, 0);
    Tensor<Real> loss;
    for (std::size_t i = 0; i < n_train; ++i) {
      const auto& ex = examples[order[i]];
      Tensor<Real> ce =
          cross_entropy(detail::probe_logits(ex, mix_w, head_w, head_b, pool), ex.labels);
      loss = i == 0 ? ce : add(loss, ce);
    }
    loss = scale(loss, Real(1) / static_cast<Real>(n_train));
    pstore.zero_grad();
    backward(loss);
    const OptimStepInfo info = opt.step(pstore, epoch);

    MetricsRecord rec;
    rec.step = epoch + 1;
    rec.L_pred1 = rec.L_pred2 = rec.L_total = static_cast<double>(loss.item());
    rec.lr = info.lr;
    result.history.push_back(rec);
  }

  // Held-out accuracy with the final parameters; inputs are all detached so
  // these forwards record no graph.
  Tensor<Real> final_w = softmax(mix_logits.detach(), 0);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = n_train; i < order.size(); ++i) {
    const auto& ex = examples[order[i]];
    Tensor<Real> out =
        detail::probe_logits(ex, final_w, head_w.detach(), head_b.detach(), pool);
    const auto& ov = out.value();
    for (std::size_t r = 0; r < ex.labels.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < n_classes; ++j)
        if (ov[r * n_classes + j] > ov[r * n_classes + best]) best = j;
      correct += best == ex.labels[r] ? 1 : 0;
      ++total;
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  result.weights = make_layer_weights(mix_logits.value());
  return result;
}

// ---------------------------------------------------------------------------
// weight-analysis export
// ---------------------------------------------------------------------------

// Shannon entropy (nats) of a weight distribution — higher means the mass is
// spread over more layers.  Zero weights contribute zero.
template <typename Real>
double weight_entropy(const std::vector<Real>& w) {
  double h = 0.0;
  for (Real x : w) {
    const double p = static_cast<double>(x);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// Writes {"tasks": {task -> [w0..wL]}, "entropy": {task -> nats}} as UTF-8
// JSON.  Weights are re-validated before writing; doubles serialize with
// enough digits to parse back bitwise.
template <typename Real>
void export_weight_analysis(
    const std::vector<std::pair<std::string, LayerWeights<Real>>>& tasks,
    const std::filesystem::path& path) {
  nlohmann::ordered_json root;
  root["tasks"] = nlohmann::ordered_json::object();
  root["entropy"] = nlohmann::ordered_json::object();
  for (const auto& [name, lw] : tasks) {
    lw.validate();
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (Real w : lw.weights) arr.push_back(static_cast<double>(w));
    root["tasks"][name] = std::move(arr);
    root["entropy"][name] = weight_entropy(lw.weights);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("weight analysis: cannot open ", path.string(), " for writing");
  out << root.dump(2) << '\n';
  out.flush();
  if (!out) fail_runtime("weight analysis: write to ", path.string(), " failed");
}

}  // namespace mcr
