#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "mcr/optimizer.hpp"
#include "mcr/params.hpp"
#include "mcr/rng.hpp"
#include "mcr/tensor.hpp"

using mcr::LrDecay;
using mcr::OptimConfig;
using mcr::OptimizerKind;
using mcr::ParamStore;
using mcr::RngStream;
using mcr::TensorD;

namespace {

// Plant exact gradients through a linear graph: d(sum(p*w))/dp == w.
void plant_grads(ParamStore<double>& store, const std::vector<std::vector<double>>& want) {
  store.zero_grad();
  for (std::size_t i = 0; i < store.size(); ++i) {
    TensorD w = TensorD::constant(store.tensor(i).shape(), want[i]);
    mcr::backward(mcr::sum(mcr::mul(store.tensor(i), w)));
  }
}

ParamStore<double> two_params(double a0, double a1, double b0) {
  ParamStore<double> s;
  s.add("a", TensorD::param({2}, {a0, a1}));
  s.add("b", TensorD::param({1}, {b0}));
  return s;
}

bool same_bits(const ParamStore<double>& x, const ParamStore<double>& y) {
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& a = x.tensor(i).value();
    const auto& b = y.tensor(i).value();
    if (a.size() != b.size()) return false;
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("learning rate ramps linearly then decays to zero", "[optim]") {
  // lr 0.5, warmup 4, total 10
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 0) == Catch::Approx(0.125));
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 3) == Catch::Approx(0.5));
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 4) == Catch::Approx(0.5));
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 7) == Catch::Approx(0.25));
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 9) == Catch::Approx(0.5 / 6.0));
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 10) == 0.0);
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kLinear, 500) == 0.0);
  // cosine: full lr at the warmup boundary, half at the midpoint
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kCosine, 4) == Catch::Approx(0.5));
  REQUIRE(mcr::lr_at(0.5, 4, 10, LrDecay::kCosine, 7) == Catch::Approx(0.25));
  // no warmup: starts at the decay ramp directly
  REQUIRE(mcr::lr_at(1.0, 0, 10, LrDecay::kLinear, 0) == Catch::Approx(1.0));
}

TEST_CASE("adam under a constant gradient descends by lr per step", "[optim]") {
  // With g constant, bias-corrected mhat/sqrt(vhat) == sign(g), so each step
  // moves by lr/(1 + eps/|g|) — within 1e-6 of lr for these settings.
  for (double g : {0.5, 50.0, -3.0}) {
    OptimConfig cfg;
    cfg.kind = OptimizerKind::kAdam;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.99;
    cfg.eps = 1e-8;
    cfg.grad_clip = 0.0;
    cfg.warmup_updates = 0;
    cfg.total_updates = 1000000;  // keep the schedule flat at lr
    ParamStore<double> store;
    store.add("p", TensorD::param({1}, {1.0}));
    mcr::Optimizer<double> opt(cfg);
    opt.attach(store);
    for (int s = 0; s < 5; ++s) {
      plant_grads(store, {{g}});
      auto info = opt.step(store, static_cast<std::size_t>(s));
      REQUIRE(info.lr == Catch::Approx(0.1).margin(1e-15));
    }
    const double want = 1.0 - 5 * 0.1 * (g > 0 ? 1.0 : -1.0);
    REQUIRE(store.tensor(0).value()[0] == Catch::Approx(want).margin(1e-5));
    REQUIRE(opt.updates_applied() == 5);
  }
}

TEST_CASE("first adam step matches the closed form", "[optim]") {
  OptimConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.99;
  cfg.eps = 1e-8;
  cfg.grad_clip = 0.0;
  cfg.warmup_updates = 0;
  cfg.total_updates = 100;
  ParamStore<double> store;
  store.add("p", TensorD::param({1}, {1.0}));
  mcr::Optimizer<double> opt(cfg);
  opt.attach(store);
  plant_grads(store, {{0.5}});
  opt.step(store, 0);
  // m=0.05 v=0.0025 mhat=0.5 vhat=0.25 -> update = 0.1*0.5/(0.5+1e-8)
  const double want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
  REQUIRE(store.tensor(0).value()[0] == Catch::Approx(want).epsilon(1e-14));
}

TEST_CASE("global-norm clip rescales exactly once past the ceiling", "[optim]") {
  OptimConfig cfg;
  cfg.kind = OptimizerKind::kSgd;
  cfg.lr = 1.0;
  cfg.grad_clip = 1.0;
  cfg.warmup_updates = 0;
  cfg.total_updates = 2;  // lr_at(0) == 1
  ParamStore<double> store = two_params(0.0, 0.0, 0.0);
  mcr::Optimizer<double> opt(cfg);
  opt.attach(store);
  plant_grads(store, {{3.0, 0.0}, {4.0}});
  auto info = opt.step(store, 0);
  REQUIRE(info.grad_norm == Catch::Approx(5.0));
  REQUIRE(info.clipped);
  REQUIRE(store.tensor(0).value()[0] == Catch::Approx(-0.6).epsilon(1e-14));
  REQUIRE(store.tensor(1).value()[0] == Catch::Approx(-0.8).epsilon(1e-14));

  // below the ceiling: untouched direction, clipped flag off
  ParamStore<double> calm = two_params(0.0, 0.0, 0.0);
  mcr::Optimizer<double> opt2(cfg);
  opt2.attach(calm);
  plant_grads(calm, {{0.3, 0.0}, {0.4}});
  auto info2 = opt2.step(calm, 0);
  REQUIRE_FALSE(info2.clipped);
  REQUIRE(calm.tensor(0).value()[0] == Catch::Approx(-0.3).epsilon(1e-14));

  // clip <= 0 disables even for huge gradients
  OptimConfig open = cfg;
  open.grad_clip = 0.0;
  ParamStore<double> loud = two_params(0.0, 0.0, 0.0);
  mcr::Optimizer<double> opt3(open);
  opt3.attach(loud);
  plant_grads(loud, {{300.0, 0.0}, {400.0}});
  auto info3 = opt3.step(loud, 0);
  REQUIRE_FALSE(info3.clipped);
  REQUIRE(loud.tensor(0).value()[0] == Catch::Approx(-300.0));
}

TEST_CASE("sgd halved lr absorbs doubled gradients bitwise", "[optim]") {
  OptimConfig a;
  a.kind = OptimizerKind::kSgd;
  a.lr = 0.25;
  a.grad_clip = 0.0;
  a.warmup_updates = 0;
  a.total_updates = 1000;
  OptimConfig b = a;
  b.lr = 0.125;

  ParamStore<double> sa = two_params(0.7, -0.2, 1.5);
  ParamStore<double> sb = two_params(0.7, -0.2, 1.5);
  mcr::Optimizer<double> oa(a), ob(b);
  oa.attach(sa);
  ob.attach(sb);
  RngStream rng = RngStream::root(77).derive("sgd");
  for (int s = 0; s < 50; ++s) {
    std::vector<double> g1 = {rng.next_normal(), rng.next_normal()};
    std::vector<double> g2 = {rng.next_normal()};
    plant_grads(sa, {g1, g2});
    plant_grads(sb, {{2 * g1[0], 2 * g1[1]}, {2 * g2[0]}});
    oa.step(sa, static_cast<std::size_t>(s));
    ob.step(sb, static_cast<std::size_t>(s));
    REQUIRE(same_bits(sa, sb));
  }
}

TEST_CASE("adam doubled gradients with doubled eps match bitwise", "[optim]") {
  OptimConfig a;
  a.kind = OptimizerKind::kAdam;
  a.lr = 3e-4;
  a.beta1 = 0.9;
  a.beta2 = 0.98;
  a.eps = 1e-6;
  a.grad_clip = 0.0;
  a.warmup_updates = 5;
  a.total_updates = 1000;
  OptimConfig b = a;
  b.eps = 2e-6;

  ParamStore<double> sa = two_params(0.7, -0.2, 1.5);
  ParamStore<double> sb = two_params(0.7, -0.2, 1.5);
  mcr::Optimizer<double> oa(a), ob(b);
  oa.attach(sa);
  ob.attach(sb);
  RngStream rng = RngStream::root(78).derive("adam");
  for (int s = 0; s < 50; ++s) {
    std::vector<double> g1 = {rng.next_normal(), rng.next_normal()};
    std::vector<double> g2 = {rng.next_normal()};
    plant_grads(sa, {g1, g2});
    plant_grads(sb, {{2 * g1[0], 2 * g1[1]}, {2 * g2[0]}});
    oa.step(sa, static_cast<std::size_t>(s));
    ob.step(sb, static_cast<std::size_t>(s));
    REQUIRE(same_bits(sa, sb));
  }
}

TEST_CASE("identical inputs replay identical trajectories", "[optim]") {
  OptimConfig cfg;
  cfg.kind = OptimizerKind::kAdam;
  cfg.grad_clip = 1.0;
  cfg.warmup_updates = 2;
  cfg.total_updates = 100;
  ParamStore<double> sa = two_params(0.1, 0.2, 0.3);
  ParamStore<double> sb = two_params(0.1, 0.2, 0.3);
  mcr::Optimizer<double> oa(cfg), ob(cfg);
  oa.attach(sa);
  ob.attach(sb);
  RngStream rng = RngStream::root(79);
  for (int s = 0; s < 20; ++s) {
    std::vector<double> g1 = {rng.next_normal(), rng.next_normal()};
    std::vector<double> g2 = {rng.next_normal()};
    plant_grads(sa, {g1, g2});
    plant_grads(sb, {g1, g2});
    oa.step(sa, static_cast<std::size_t>(s));
    ob.step(sb, static_cast<std::size_t>(s));
  }
  REQUIRE(same_bits(sa, sb));
}

TEST_CASE("parameters without gradients stay put under sgd", "[optim]") {
  OptimConfig cfg;
  cfg.kind = OptimizerKind::kSgd;
  cfg.lr = 0.5;
  cfg.grad_clip = 0.0;
  cfg.warmup_updates = 0;
  cfg.total_updates = 10;
  ParamStore<double> store = two_params(0.25, -1.0, 2.0);
  mcr::Optimizer<double> opt(cfg);
  opt.attach(store);
  // gradient reaches only "a"
  store.zero_grad();
  TensorD w = TensorD::constant({2}, {1.0, 1.0});
  mcr::backward(mcr::sum(mcr::mul(store.tensor(0), w)));
  opt.step(store, 0);
  REQUIRE(store.tensor(0).value()[0] == Catch::Approx(0.25 - 0.5));
  REQUIRE(store.tensor(1).value()[0] == 2.0);  // untouched, bitwise

  REQUIRE_THROWS_AS(
      [] {
        OptimConfig bad;
        bad.lr = 0.0;
        mcr::Optimizer<double> o(bad);
      }(),
      std::invalid_argument);
}
