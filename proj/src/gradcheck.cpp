#include "lgcaps/gradcheck.hpp"

#include <cmath>
#include <numeric>

namespace lgcaps {

double rel_err(double a, double cd) {
  const double denom = std::max({std::fabs(a), std::fabs(cd), 1e-8});
  return std::fabs(a - cd) / denom;
}

GradCheckResult grad_check(
    const std::function<double(bool want_grad, std::vector<Tensor>& grads)>& f,
    std::vector<Tensor>& inputs, Rng& rng, double h, int max_coords_per_input) {
  std::vector<Tensor> grads(inputs.size());
  const double base = f(true, grads);
  if (!std::isfinite(base)) throw Error("grad_check: loss is not finite");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!grads[i].defined())
      throw Error("grad_check: no gradient produced for input " + std::to_string(i));
    if (!grads[i].all_finite())
      throw Error("grad_check: non-finite gradient for input " + std::to_string(i));
  }

  GradCheckResult res;
  std::vector<Tensor> unused;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& x = inputs[i];
    const int n = static_cast<int>(x.numel());
    std::vector<int> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > max_coords_per_input) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(static_cast<std::size_t>(max_coords_per_input));
    }
    for (int c : coords) {
      const double saved = x.data()[c];
      x.data()[c] = saved + h;
      const double fp = f(false, unused);
      x.data()[c] = saved - h;
      const double fm = f(false, unused);
      x.data()[c] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw Error("grad_check: non-finite loss during perturbation");
      const double cd = (fp - fm) / (2.0 * h);
      const double a = grads[i].data()[c];
      // Second difference ~ h^2 f'' for smooth f; a kink inside the step
      // inflates it to the size of the bias it adds to cd (exactly equal for
      // piecewise-linear f), so anything above the tolerance we certify
      // against invalidates the probe.
      const double bend = std::fabs(fp + fm - 2.0 * base) / (2.0 * h);
      if (bend > 5e-5 * std::max({std::fabs(a), std::fabs(cd), 1e-8})) {
        ++res.skipped;
        continue;
      }
      ++res.checked;
      const double e = rel_err(a, cd);
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.analytic = a;
        res.numeric = cd;
        res.where = "input[" + std::to_string(i) + "][" + std::to_string(c) + "]";
      }
    }
  }
  return res;
}

}  // namespace lgcaps
