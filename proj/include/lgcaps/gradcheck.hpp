#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lgcaps/rng.hpp"
#include "lgcaps/tensor.hpp"

namespace lgcaps {

struct GradCheckResult {
  double max_rel_err = 0.0;   // worst coordinate over all checked entries
  double analytic = 0.0;      // value at the worst coordinate
  double numeric = 0.0;
  std::string where;          // "input[3]" style location of the worst coordinate
  int checked = 0;
  int skipped = 0;            // probes rejected by the smoothness filter
  bool ok(double tol) const { return max_rel_err <= tol && checked > 0; }
};

// Central-difference check of a scalar-valued function against analytic grads.
//
// `f` evaluates the loss at the current contents of `inputs` and, when
// `want_grad` is true, fills `grads[i]` with dloss/dinputs[i]. Inputs are
// perturbed in place. Checks at most `max_coords_per_input` coordinates per
// tensor, chosen with `rng` (all of them if the tensor is small enough).
//
// Probes whose second difference |f(x+h)+f(x-h)-2f(x)| reveals a kink inside
// the step (relu crossings) are skipped: the central difference is not a
// valid derivative estimate there. Skips are counted, never silently hidden.
GradCheckResult grad_check(
    const std::function<double(bool want_grad, std::vector<Tensor>& grads)>& f,
    std::vector<Tensor>& inputs, Rng& rng, double h = 1e-5,
    int max_coords_per_input = 24);

// rel err between analytic a and central difference cd, as used everywhere.
double rel_err(double a, double cd);

}  // namespace lgcaps
