#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "lgcaps/gradcheck.hpp"

// The named finite-difference suite behind both the `gradcheck` CLI command
// and the acceptance run: one case per differentiable operation family plus
// a slim 2-layer routed model checked through its parameters.

namespace lgcaps {

struct GradSuiteCase {
  std::string name;
  // Runs one seeded trial; distinct seeds draw fresh operands (and fresh
  // probe coordinates) so repeated runs cover different slices.
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

const std::vector<GradSuiteCase>& gradient_suite();

struct GradSuiteCaseReport {
  std::string name;
  double max_rel_err = 0.0;
  std::string worst_where;     // "seed=S input[i][c]"
  int checked = 0, skipped = 0;
  bool ok = false;
};

struct GradSuiteReport {
  std::vector<GradSuiteCaseReport> cases;
  double tol = 0.0;
  int seeds = 0;
  bool all_ok() const;
};

// Runs every case over seeds 0..n_seeds-1. When `log` is given, prints one
// line per case: "name  max_rel_err  checked/skipped  PASS|FAIL".
GradSuiteReport run_gradient_suite(int n_seeds, double tol, std::ostream* log);

}  // namespace lgcaps
