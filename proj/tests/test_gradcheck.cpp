// Finite differences are the oracle here: every registered op and composite
// must agree with central differences to well inside the 1e-4 gate.  A
// deliberately wrong gradient is also planted to prove the harness can fail.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mcr/gradcheck.hpp"

using mcr::GradcheckCase;
using mcr::TensorD;

TEST_CASE("every registered op matches finite differences", "[gradcheck]") {
  const auto reports = mcr::run_gradcheck(mcr::gradcheck_registry());
  REQUIRE_FALSE(reports.empty());
  for (const auto& r : reports) {
    INFO(r.name << ": max rel err " << r.max_rel_err << " over " << r.probes
                << " probes");
    REQUIRE(r.probes > 0);
    REQUIRE(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("harness flags a corrupted gradient", "[gradcheck]") {
  // y = 2x pretending to be y = x: analytic grad 1, FD sees 2.
  GradcheckCase broken{
      "deliberately_wrong",
      {{3}},
      [](const std::vector<TensorD>& x) {
        // value path doubles, but we hide the factor from autodiff by
        // detaching one addend: d/dx (x + detach(x)) = 1, FD measures 2
        return sum(add(x[0], x[0].detach()));
      }};
  const auto rep = mcr::gradcheck_case(broken, mcr::RngStream::root(1));
  REQUIRE(rep.max_rel_err > 0.4);
}

TEST_CASE("probe subsampling still touches every input", "[gradcheck]") {
  mcr::GradcheckSettings st;
  st.max_probes_per_input = 4;
  const auto reports =
      mcr::run_gradcheck(mcr::gradcheck_registry(), /*seed=*/23, st);
  for (const auto& r : reports) {
    INFO(r.name);
    REQUIRE(r.probes > 0);
    REQUIRE(r.max_rel_err < 1e-4);
  }
}
