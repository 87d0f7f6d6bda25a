// Frozen-upstream probe: layer-weight mixing, the classification loss, probe
// training on the toy tasks, and the weight-analysis exporter.
//
// Oracle values are computed by hand and frozen here:
//   - weighted_sum over [[4]], [[0]] with w = [0.25, 0.75]:
//       0.25*4 + 0.75*0 = 1, every term exact in binary floating point.
//   - cross-entropy of a uniform logit row is log(n_classes) regardless of
//     the label, and adding a constant to a row must not change the loss.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcr/data.hpp"
#include "mcr/model.hpp"
#include "mcr/probe.hpp"
#include "mcr/rng.hpp"
#include "mcr/tensor.hpp"
#include "mcr/trainer.hpp"

using namespace mcr;
using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using Catch::Approx;

namespace {

ModelConfig probe_model_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.ffn_mult = 2;
  cfg.dropout_rate = 0.1;
  cfg.layerdrop_rate = 0.1;
  cfg.decoder_layers = 1;
  cfg.decoder_kernel = 3;
  cfg.feature_encoder = {{8, 6, 3}, {16, 4, 4}};
  cfg.pos_conv_kernel = 5;
  return cfg;
}

std::vector<std::vector<float>> param_snapshot(const ParamStore<float>& p) {
  std::vector<std::vector<float>> snap;
  for (std::size_t i = 0; i < p.size(); ++i) snap.push_back(p.tensor(i).value());
  return snap;
}

bool snapshot_equal(const std::vector<std::vector<float>>& a, const ParamStore<float>& p) {
  if (a.size() != p.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& v = p.tensor(i).value();
    if (a[i].size() != v.size()) return false;
    if (std::memcmp(a[i].data(), v.data(), v.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

// Hand-built clips whose label is a deterministic function of the upstream's
// own layer-0 energy: half the clips are silence, half carry a noisy tone,
// and each clip is labeled by a median split of its mean squared feature
// value.  The feature encoder normalizes per frame, so scale contrasts wash
// out — but a zero-variance frame collapses to the normalizer's bias path,
// leaving silence at (near-)zero feature energy and signal well above it.
std::vector<Clip<float>> energy_task_clips(Model<float>& model, std::size_t n_clips,
                                           std::size_t clip_len) {
  RngStream rng = RngStream::root(99).derive("energy-task");
  std::vector<Clip<float>> clips(n_clips);
  for (std::size_t i = 0; i < n_clips; ++i) {
    clips[i].samples.assign(clip_len, 0.0f);
    const double f = 200.0 + 200.0 * rng.next_double();
    if (i % 2 == 1)
      for (std::size_t t = 0; t < clip_len; ++t)
        clips[i].samples[t] = static_cast<float>(
            0.5 * std::sin(2.0 * std::numbers::pi * f * t / 8000.0) +
            0.1 * rng.next_normal());
  }
  std::vector<double> energy(n_clips);
  for (std::size_t i = 0; i < n_clips; ++i) {
    TensorF frames = model.feature_encode(clips[i].samples);
    double e = 0.0;
    for (float v : frames.value()) e += static_cast<double>(v) * v;
    energy[i] = e / static_cast<double>(frames.size());
  }
  std::vector<double> sorted = energy;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[n_clips / 2];
  for (std::size_t i = 0; i < n_clips; ++i) {
    clips[i].tone_class = energy[i] >= median ? 1 : 0;
    clips[i].voiced.assign(clips[i].samples.size() / 12, 1);
  }
  return clips;
}

}  // namespace

TEST_CASE("weighted_sum matches hand arithmetic and selection", "[probe]") {
  SECTION("two scalarish layers, w = [0.25, 0.75]") {
    TensorD h1 = TensorD::constant({1, 1}, {4.0});
    TensorD h2 = TensorD::constant({1, 1}, {0.0});
    TensorD w = TensorD::constant({2}, {0.25, 0.75});
    TensorD out = weighted_sum<double>({h1, h2}, w);
    REQUIRE(out.value()[0] == 1.0);  // frozen: 0.25*4 + 0.75*0, all exact
  }
  SECTION("one-hot weights pick that layer bitwise") {
    RngStream r = RngStream::root(5).derive("onehot");
    std::vector<float> a(12), b(12), c(12);
    for (auto& v : a) v = static_cast<float>(r.next_normal());
    for (auto& v : b) v = static_cast<float>(r.next_normal());
    for (auto& v : c) v = static_cast<float>(r.next_normal());
    TensorF out = weighted_sum<float>(
        {TensorF::constant({3, 4}, a), TensorF::constant({3, 4}, b),
         TensorF::constant({3, 4}, c)},
        TensorF::constant({3}, {0.0f, 1.0f, 0.0f}));
    REQUIRE(std::memcmp(out.value().data(), b.data(), b.size() * sizeof(float)) == 0);
  }
  SECTION("uniform weights over identical tensors return the common tensor") {
    RngStream r = RngStream::root(6).derive("uniform");
    std::vector<float> a(10);
    for (auto& v : a) v = static_cast<float>(r.next_normal());
    TensorF h = TensorF::constant({5, 2}, a);
    // Uniform softmax weights for 2 and 4 layers are exactly 0.5 and 0.25,
    // and n copies of x * (1/n) sum back to x exactly for power-of-two n.
    for (std::size_t n : {std::size_t{2}, std::size_t{4}}) {
      LayerWeights<float> lw =
          make_layer_weights<float>(std::vector<float>(n, 0.0f));
      TensorF out = weighted_sum(std::vector<TensorF>(n, h), lw);
      REQUIRE(std::memcmp(out.value().data(), a.data(), a.size() * sizeof(float)) == 0);
    }
  }
  SECTION("length and shape mismatches are rejected") {
    TensorF h = TensorF::full({2, 2}, 1.0f);
    REQUIRE_THROWS_AS(weighted_sum<float>({h, h}, TensorF::constant({3}, {1, 0, 0})),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(weighted_sum<float>({h, TensorF::full({2, 3}, 1.0f)},
                                          TensorF::constant({2}, {0.5f, 0.5f})),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(weighted_sum<float>({}, TensorF::constant({0}, {})),
                      std::invalid_argument);
  }
}

TEST_CASE("weighted_sum is homogeneous in the mixed tensors", "[probe]") {
  RngStream r = RngStream::root(7).derive("homog");
  std::vector<TensorF> h;
  for (int k = 0; k < 3; ++k) {
    std::vector<float> v(20);
    for (auto& x : v) x = static_cast<float>(r.next_normal());
    h.push_back(TensorF::constant({4, 5}, v));
  }
  std::vector<float> lg = {0.3f, -0.8f, 1.1f};
  TensorF w = softmax(TensorF::constant({3}, lg), 0);
  TensorF base = weighted_sum(h, w);

  SECTION("power-of-two scale is exact") {
    std::vector<TensorF> h2;
    for (const auto& t : h) h2.push_back(scale(t, 2.0f));
    TensorF out = weighted_sum(h2, w);
    for (std::size_t i = 0; i < out.size(); ++i)
      REQUIRE(out.value()[i] == 2.0f * base.value()[i]);
  }
  SECTION("general scale holds to rounding") {
    std::vector<TensorF> h2;
    for (const auto& t : h) h2.push_back(scale(t, 3.7f));
    TensorF out = weighted_sum(h2, w);
    for (std::size_t i = 0; i < out.size(); ++i)
      REQUIRE(out.value()[i] ==
              Approx(3.7f * base.value()[i]).epsilon(1e-5).margin(1e-6));
  }
}

TEST_CASE("layer weights are a normalized softmax", "[probe]") {
  LayerWeights<float> lw = make_layer_weights<float>({0.5f, -1.0f, 2.0f, 0.0f, 1.5f});
  REQUIRE(lw.weights.size() == 5);
  double total = 0.0;
  for (float w : lw.weights) {
    REQUIRE(w >= 0.0f);
    total += w;
  }
  REQUIRE(std::abs(total - 1.0) <= 1e-6);

  SECTION("validate rejects a broken sum") {
    lw.weights[0] += 0.01f;
    REQUIRE_THROWS_AS(lw.validate(), std::invalid_argument);
  }
  SECTION("validate rejects a negative weight") {
    lw.weights[1] = -lw.weights[1] - 0.001f;
    REQUIRE_THROWS_AS(lw.validate(), std::invalid_argument);
  }
  SECTION("empty logits rejected") {
    REQUIRE_THROWS_AS(make_layer_weights<float>({}), std::invalid_argument);
  }
}

TEST_CASE("cross-entropy matches analytic values", "[probe]") {
  SECTION("uniform rows cost log(n_classes)") {
    REQUIRE(cross_entropy(TensorD::constant({1, 2}, {0.0, 0.0}), {0}).item() ==
            Approx(std::log(2.0)).epsilon(1e-12));
    REQUIRE(cross_entropy(TensorD::constant({1, 3}, {1.0, 1.0, 1.0}), {2}).item() ==
            Approx(std::log(3.0)).epsilon(1e-12));
  }
  SECTION("shifting a row by a constant changes nothing") {
    const double base =
        cross_entropy(TensorD::constant({1, 2}, {0.4, -0.3}), {1}).item();
    const double shifted =
        cross_entropy(TensorD::constant({1, 2}, {100.4, 99.7}), {1}).item();
    REQUIRE(shifted == Approx(base).epsilon(1e-9));
  }
  SECTION("mean over rows, hand-checked") {
    // rows [0,0] label 0 and [0, log 3] label 1:
    //   ln 2 and ln(4/3); mean = (ln 2 + ln(4/3)) / 2.
    TensorD x = TensorD::constant({2, 2}, {0.0, 0.0, 0.0, std::log(3.0)});
    REQUIRE(cross_entropy(x, {0, 1}).item() ==
            Approx(0.5 * (std::log(2.0) + std::log(4.0 / 3.0))).epsilon(1e-12));
  }
  SECTION("label out of range rejected") {
    REQUIRE_THROWS_AS(cross_entropy(TensorD::constant({1, 2}, {0.0, 0.0}), {2}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(cross_entropy(TensorD::constant({1, 2}, {0.0, 0.0}), {0, 1}),
                      std::invalid_argument);
  }
}

TEST_CASE("probe recovers an energy-separable utterance task", "[probe]") {
  ModelConfig cfg = probe_model_config();
  Model<float> model = Model<float>::init(cfg, 21);
  std::vector<Clip<float>> clips = energy_task_clips(model, 40, 120);

  ProbeSpec spec;
  spec.epochs = 120;
  const auto before = param_snapshot(model.params);
  ProbeResult<float> res =
      probe_train(model.params, cfg, ProbeTaskKind::kUtteranceClass, clips, 2, spec);

  REQUIRE(snapshot_equal(before, model.params));  // upstream untouched
  REQUIRE(res.accuracy > 0.5 + 0.2);
  REQUIRE(res.weights.weights.size() == cfg.n_layers + 1);  // layer 0 included
  res.weights.validate();

  SECTION("history uses the trainer metrics schema") {
    REQUIRE(res.history.size() == spec.epochs);
    for (std::size_t i = 0; i < res.history.size(); ++i) {
      REQUIRE(res.history[i].step == i + 1);
      REQUIRE(res.history[i].L_mcr == 0.0);
      REQUIRE(res.history[i].tau == 0.0);
      REQUIRE(res.history[i].L_total == res.history[i].L_pred1);
    }
    const MetricsRecord rt =
        metrics_from_json(nlohmann::json::parse(metrics_to_jsonl(res.history[0])));
    REQUIRE(rt.step == res.history[0].step);
    REQUIRE(rt.L_total == res.history[0].L_total);
    REQUIRE(rt.lr == res.history[0].lr);
    // training should actually have reduced the loss
    REQUIRE(res.history.back().L_total < 0.5 * res.history.front().L_total);
  }
  SECTION("excluding layer 0 shrinks the mixture") {
    ProbeSpec no0 = spec;
    no0.epochs = 3;
    no0.include_layer0 = false;
    ProbeResult<float> r2 =
        probe_train(model.params, cfg, ProbeTaskKind::kUtteranceClass, clips, 2, no0);
    REQUIRE(r2.weights.weights.size() == cfg.n_layers);
  }
  SECTION("empty dataset rejected") {
    REQUIRE_THROWS_AS(probe_train<float>(model.params, cfg,
                                         ProbeTaskKind::kUtteranceClass, {}, 2, spec),
                      std::invalid_argument);
  }
}

TEST_CASE("probe learns voiced/unvoiced frame labels", "[probe]") {
  ModelConfig cfg = probe_model_config();
  Model<float> model = Model<float>::init(cfg, 22);

  SyntheticSpec sspec;
  sspec.n_clips = 30;
  sspec.clip_len_samples = 240;
  sspec.harmonics = 2;
  sspec.seed = 77;
  std::vector<Clip<float>> clips = make_corpus<float>(sspec, cfg.cumulative_stride());

  ProbeSpec spec;
  spec.epochs = 120;
  ProbeResult<float> res =
      probe_train(model.params, cfg, ProbeTaskKind::kFrameLabel, clips, 2, spec);
  REQUIRE(res.accuracy > 0.5 + 0.2);

  SECTION("random labels land at chance") {
    RngStream coin = RngStream::root(123).derive("random-labels");
    for (auto& clip : clips)
      for (auto& v : clip.voiced) v = coin.next_bernoulli(0.5) ? 1 : 0;
    ProbeResult<float> rnd =
        probe_train(model.params, cfg, ProbeTaskKind::kFrameLabel, clips, 2, spec);
    REQUIRE(rnd.accuracy >= 0.4);
    REQUIRE(rnd.accuracy <= 0.6);
  }
}

TEST_CASE("weight-analysis export round-trips bitwise", "[probe]") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "mcr_probe_weights_test.json";

  // Four encoder layers plus the feature-encoder slot -> five weights.
  LayerWeights<float> a = make_layer_weights<float>({0.1f, 0.7f, -0.4f, 1.2f, 0.0f});
  LayerWeights<float> b = make_layer_weights<float>({-1.0f, 0.0f, 0.3f, 0.9f, 2.0f});
  export_weight_analysis<float>(
      {{"utterance-classification", a}, {"frame-labeling", b}}, path);

  std::ifstream in(path);
  REQUIRE(in.good());
  nlohmann::json root = nlohmann::json::parse(in);
  REQUIRE(root.at("tasks").size() == 2);
  for (const auto& [name, lw] :
       std::vector<std::pair<std::string, LayerWeights<float>>>{
           {"utterance-classification", a}, {"frame-labeling", b}}) {
    const auto& arr = root.at("tasks").at(name);
    REQUIRE(arr.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      const double parsed = arr[i].get<double>();
      REQUIRE(parsed == static_cast<double>(lw.weights[i]));  // bitwise
    }
    REQUIRE(root.at("entropy").at(name).get<double>() == weight_entropy(lw.weights));
  }

  SECTION("tampered weights are rejected before writing") {
    a.weights[0] += 0.01f;
    REQUIRE_THROWS_AS(export_weight_analysis<float>({{"bad", a}}, path),
                      std::invalid_argument);
  }
  fs::remove(path);
}
