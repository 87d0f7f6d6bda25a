#pragma once

// The pre-training loop.  One step:
//   sample a batch (pure function of seed and step, with replacement)
//   per sample: feature-encode, teacher pass on detached frames, build target
//   per view:   mask, then one or two stochastic student passes -> objective
//   average over samples and views, backward, clip, optimizer, EMA update
//
// Every random draw comes from a stream derived from
// (seed, purpose, step, sample id, view, pass), so batch order is irrelevant
// to any individual view and any prefix of the run replays bitwise — the
// foundation of checkpoint resume.  mode=baseline runs pass 1 only and its
// objective is the plain masked prediction loss; no pass-2 graph is built.
//
// A non-finite loss aborts the step before any parameter changes, listing
// every offending (sample, view) pair.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcr/checkpoint.hpp"
#include "mcr/config.hpp"
#include "mcr/data.hpp"
#include "mcr/masking.hpp"
#include "mcr/model.hpp"
#include "mcr/objective.hpp"
#include "mcr/optimizer.hpp"
#include "mcr/params.hpp"
#include "mcr/teacher.hpp"
#include "mcr/tensor.hpp"

namespace mcr {

struct TrainAbortError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricsRecord {
  std::uint64_t step = 0;  // 1-based count of completed updates
  double L_pred1 = 0.0;
  double L_pred2 = 0.0;
  double L_mcr = 0.0;
  double L_total = 0.0;
  double tau = 0.0;
  double lr = 0.0;
  std::uint64_t wall_ms = 0;  // stays 0 unless train.log_wall_ms
};

// One JSONL line, keys in declaration order ("τ" is the field's name).
inline std::string metrics_to_jsonl(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["L_pred1"] = r.L_pred1;
  j["L_pred2"] = r.L_pred2;
  j["L_mcr"] = r.L_mcr;
  j["L_total"] = r.L_total;
  j["τ"] = r.tau;
  j["lr"] = r.lr;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<std::uint64_t>();
  r.L_pred1 = j.at("L_pred1").get<double>();
  r.L_pred2 = j.at("L_pred2").get<double>();
  r.L_mcr = j.at("L_mcr").get<double>();
  r.L_total = j.at("L_total").get<double>();
  r.tau = j.at("τ").get<double>();
  r.lr = j.at("lr").get<double>();
  r.wall_ms = j.at("wall_ms").get<std::uint64_t>();
  return r;
}

// The training-time stream tree, a pure function of its coordinates.  Batch
// composition draws from (seed, update); each view's mask comes from the
// mask parent's derive(view); each stochastic pass draws from (seed, update,
// sample, view, pass).  Nothing depends on a sample's position in the batch.
inline RngStream train_batch_stream(std::uint64_t seed, std::uint64_t update) {
  return RngStream::root(seed).derive("batch").derive(update);
}

inline RngStream train_mask_parent(std::uint64_t seed, std::uint64_t update,
                                   std::size_t sample) {
  return RngStream::root(seed).derive("mask").derive(update).derive(sample);
}

inline RngStream train_pass_stream(std::uint64_t seed, std::uint64_t update,
                                   std::size_t sample, std::size_t view,
                                   std::uint64_t pass_id) {
  return RngStream::root(seed)
      .derive("pass")
      .derive(update)
      .derive(sample)
      .derive(view)
      .derive(pass_id);
}

template <typename Real>
class Trainer {
 public:
  explicit Trainer(const Config& cfg) : cfg_(cfg) {
    cfg_.validate();
    model_ = Model<Real>::init(cfg_.model, cfg_.train.seed);
    teacher_ = make_teacher_store(model_.params, cfg_.ema.track_feature_encoder);
    opt_ = Optimizer<Real>(cfg_.train.optim);
    opt_.attach(model_.params);
    load_corpus();
  }

  const Config& config() const { return cfg_; }
  const Model<Real>& model() const { return model_; }
  Model<Real>& model_mut() { return model_; }
  const ParamStore<Real>& teacher() const { return teacher_; }
  std::uint64_t global_step() const { return global_step_; }
  const std::vector<Clip<Real>>& corpus() const { return corpus_; }

  // Batch composition for a 0-based update index: a pure function of
  // (seed, step), independent of all other streams.
  std::vector<std::size_t> batch_indices(std::uint64_t update) const {
    RngStream b = train_batch_stream(cfg_.train.seed, update);
    std::vector<std::size_t> idx(cfg_.train.batch_size);
    for (auto& i : idx) i = b.next_index(corpus_.size());
    return idx;
  }

  MetricsRecord step() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t update = global_step_;
    const std::vector<std::size_t> batch = batch_indices(update);
    const std::size_t views = cfg_.mask.views;
    const bool dual = cfg_.train.mode == McrMode::kMcr;

    std::vector<Tensor<Real>> totals;
    totals.reserve(batch.size() * views);
    MetricsRecord rec;
    std::string bad;  // non-finite (sample, view) pairs

    for (std::size_t sample : batch) {
      Tensor<Real> frames = model_.feature_encode(corpus_[sample].samples);
      const Tensor<Real> target = teacher_target(frames, corpus_[sample].samples);
      const std::vector<MaskedView> masks = sample_views(
          frames.shape()[0], cfg_.mask, train_mask_parent(cfg_.train.seed, update, sample));

      for (std::size_t v = 0; v < views; ++v) {
        const MaskedView& view = masks[v];
        Tensor<Real> y = gather_rows(target, view.masked_idx);
        const RngStream pass1 = train_pass_stream(cfg_.train.seed, update, sample, v, 1);
        const RngStream pass2 =
            cfg_.train.alias_pass2_rng
                ? pass1
                : train_pass_stream(cfg_.train.seed, update, sample, v, 2);
        // Two-level copies of the shared inputs (parameters and frames):
        // each pass reads a private per-pass handle, which accumulates that
        // pass's full gradient sum from zero in the pass's own order; the
        // per-view handle underneath then receives one finished sum per
        // pass.  Two bitwise-identical passes deliver the same sum twice,
        // and x + x is exact in binary floating point, so the view handle
        // holds exactly twice a single pass's gradient.  That keeps the
        // dual-pass/single-pass halved-lr equivalence bitwise, even for
        // inputs a pass consumes more than once.
        const ParamStore<Real> vp = view_params();
        const Tensor<Real> frames_v = identity(frames);
        LossBundle<Real> bundle;
        if (dual) {
          auto f1 = Model<Real>::student_forward_with(pass_params(vp), cfg_.model,
                                                      identity(frames_v), view, pass1, true);
          auto f2 = Model<Real>::student_forward_with(pass_params(vp), cfg_.model,
                                                      identity(frames_v), view, pass2, true);
          bundle = mcr_objective(y, f1.prediction, f2.prediction, cfg_.objective.lambda,
                                 cfg_.objective.stop_grad);
        } else {
          auto f1 = Model<Real>::student_forward_with(pass_params(vp), cfg_.model,
                                                      identity(frames_v), view, pass1, true);
          bundle = baseline_objective(y, f1.prediction);
        }
        const double total = static_cast<double>(bundle.total.item());
        if (!std::isfinite(total)) {
          bad += bad.empty() ? "" : ", ";
          bad += "(sample " + std::to_string(sample) + ", view " + std::to_string(v) + ")";
        }
        rec.L_pred1 += static_cast<double>(bundle.pred1.item());
        rec.L_pred2 += static_cast<double>(bundle.pred2.item());
        rec.L_mcr += static_cast<double>(bundle.mcr.item());
        rec.L_total += total;
        totals.push_back(bundle.total);
      }
    }
    if (!bad.empty())
      throw TrainAbortError("training aborted at step " + std::to_string(update + 1) +
                            ": non-finite loss for " + bad);

    // Mean over samples and views, summed sample-major/view-minor so the
    // reduction order is part of the replay contract.
    Tensor<Real> loss = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) loss = add(loss, totals[i]);
    const Real inv = Real(1) / static_cast<Real>(totals.size());
    loss = scale(loss, inv);
    const double n = static_cast<double>(totals.size());
    rec.L_pred1 /= n;
    rec.L_pred2 /= n;
    rec.L_mcr /= n;
    rec.L_total /= n;

    model_.params.zero_grad();
    backward(loss);
    const OptimStepInfo info = opt_.step(model_.params, update);

    const double tau = ema_tau_at(cfg_.ema, static_cast<std::int64_t>(update));
    ema_update(teacher_, model_.params, tau);

    global_step_ += 1;
    rec.step = global_step_;
    rec.tau = tau;
    rec.lr = info.lr;
    if (cfg_.train.log_wall_ms)
      rec.wall_ms = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::milliseconds>(
              std::chrono::steady_clock::now() - t0)
              .count());
    return rec;
  }

  // --- checkpointing ---

  CheckpointFile<Real> snapshot() const {
    CheckpointFile<Real> file;
    const RngStream root = RngStream::root(cfg_.train.seed);
    file.meta = {{"config", cfg_.to_json()},
                 {"global_step", global_step_},
                 {"optim",
                  {{"t", opt_.updates_applied()},
                   {"beta1_pow", opt_.beta1_pow()},
                   {"beta2_pow", opt_.beta2_pow()}}},
                 {"rng",
                  {{"seed", root.seed},
                   {"stream_id", root.stream_id},
                   {"counter", root.counter}}}};
    append_store(file, "s.", model_.params);
    append_store(file, "t.", teacher_);
    if (cfg_.train.optim.kind == OptimizerKind::kAdam) {
      for (std::size_t i = 0; i < model_.params.size(); ++i) {
        file.arrays.push_back({"m1." + model_.params.name(i),
                               model_.params.tensor(i).shape(), opt_.moment1(i)});
        file.arrays.push_back({"m2." + model_.params.name(i),
                               model_.params.tensor(i).shape(), opt_.moment2(i)});
      }
    }
    return file;
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, snapshot()); }

  // Rebuilds a trainer from the checkpoint's own config echo and installs
  // every array; the result continues bitwise as if never interrupted.
  static Trainer resume(const std::filesystem::path& path) {
    CheckpointFile<Real> file = load_checkpoint<Real>(path);
    const nlohmann::json& meta = file.meta;
    if (!meta.contains("config"))
      throw CheckpointTruncatedError("checkpoint: metadata lacks the config echo");
    Config cfg = Config::from_json(meta.at("config"));
    Trainer t(cfg);
    install_arrays(file, "s.", t.model_.params);
    install_arrays(file, "t.", t.teacher_);
    if (cfg.train.optim.kind == OptimizerKind::kAdam) t.install_moments(file);
    t.global_step_ = meta.at("global_step").get<std::uint64_t>();
    const nlohmann::json& opt = meta.at("optim");
    t.opt_.restore_scalars(opt.at("t").get<std::uint64_t>(),
                           opt.at("beta1_pow").get<double>(),
                           opt.at("beta2_pow").get<double>());
    return t;
  }

 private:
  // Fresh graph handles on the pass-visible parameters (the feature encoder
  // is consumed before views are drawn and needs none).
  ParamStore<Real> view_params() const {
    ParamStore<Real> vp;
    for (std::size_t i = 0; i < model_.params.size(); ++i) {
      const std::string& name = model_.params.name(i);
      if (name.rfind("fe.", 0) == 0) continue;
      vp.add(name, identity(model_.params.tensor(i)));
    }
    return vp;
  }

  // One more handle layer per forward pass, so each pass sums its own
  // gradient contributions privately before handing a single finished value
  // to the per-view handle (see the step() comment).
  static ParamStore<Real> pass_params(const ParamStore<Real>& vp) {
    ParamStore<Real> pp;
    for (std::size_t i = 0; i < vp.size(); ++i) pp.add(vp.name(i), identity(vp.tensor(i)));
    return pp;
  }

  Tensor<Real> teacher_target(const Tensor<Real>& frames,
                              const std::vector<Real>& samples) {
    Tensor<Real> plain = cfg_.ema.track_feature_encoder
                             ? Model<Real>::feature_encode_with(teacher_, cfg_.model, samples)
                             : frames.detach();
    auto blocks = Model<Real>::encode_blocks(teacher_, cfg_.model, plain);
    return build_target(blocks, cfg_.effective_top_k(), cfg_.target.norm).y;
  }

  void load_corpus() {
    const std::size_t hop = cfg_.model.cumulative_stride();
    if (cfg_.data.kind == DataKind::kSynthetic) {
      corpus_ = make_corpus<Real>(cfg_.data.synthetic, hop);
      return;
    }
    auto wavs = load_wav_dir<Real>(cfg_.data.wav_dir_path);
    corpus_.reserve(wavs.size());
    for (std::size_t i = 0; i < wavs.size(); ++i) {
      if (wavs[i].samples.size() < hop)
        fail_invalid("data: wav clip ", i, " has ", wavs[i].samples.size(),
                     " samples, below the feature-encoder minimum ", hop);
      corpus_.push_back({std::move(wavs[i].samples), 0, {}});
    }
  }

  static void append_store(CheckpointFile<Real>& file, const std::string& prefix,
                           const ParamStore<Real>& store) {
    for (std::size_t i = 0; i < store.size(); ++i)
      file.arrays.push_back(
          {prefix + store.name(i), store.tensor(i).shape(), store.tensor(i).value()});
  }

  void install_moments(const CheckpointFile<Real>& file) {
    // Reuse the strict installer through scratch stores so name/shape
    // mismatches fail before any moment is overwritten.
    ParamStore<Real> m1, m2;
    for (std::size_t i = 0; i < model_.params.size(); ++i) {
      const auto& shape = model_.params.tensor(i).shape();
      m1.add(model_.params.name(i), Tensor<Real>::zeros(shape));
      m2.add(model_.params.name(i), Tensor<Real>::zeros(shape));
    }
    install_arrays(file, "m1.", m1);
    install_arrays(file, "m2.", m2);
    for (std::size_t i = 0; i < model_.params.size(); ++i) {
      opt_.moment1_mut(i) = m1.tensor(i).value();
      opt_.moment2_mut(i) = m2.tensor(i).value();
    }
  }

  Config cfg_;
  Model<Real> model_;
  ParamStore<Real> teacher_;
  Optimizer<Real> opt_;
  std::vector<Clip<Real>> corpus_;
  std::uint64_t global_step_ = 0;
};

}  // namespace mcr
