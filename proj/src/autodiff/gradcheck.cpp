#include "mcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace mcl {

namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

GradCheckResult finite_difference_check(const MultiScalarFn& f, const std::vector<Tensor>& inputs, double step) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    ad::Var root = f(tape, vars);
    tape.backward(root);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckResult res;
  std::vector<Tensor> probe = inputs;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    for (std::size_t i = 0; i < inputs[n].size(); ++i) {
      const double x0 = inputs[n][i];
      probe[n][i] = x0 + step;
      const double fp = evaluate(f, probe);
      probe[n][i] = x0 - step;
      const double fm = evaluate(f, probe);
      probe[n][i] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[n][i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        res.ok = false;
        res.max_rel_error = std::numeric_limits<double>::infinity();
        res.worst_input = n;
        res.worst_index = i;
        res.failure = "non-finite gradient at input " + std::to_string(n) + " coordinate " + std::to_string(i) +
                      (std::isfinite(a) ? " (finite difference)" : " (analytic)");
        return res;
      }
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_input = n;
        res.worst_index = i;
      }
    }
  }
  return res;
}

GradCheckResult finite_difference_check(const ScalarFn& f, const Tensor& x, double step) {
  return finite_difference_check(
      [&f](ad::Tape& t, std::span<const ad::Var> v) { return f(t, v[0]); }, std::vector<Tensor>{x}, step);
}

Tensor tie_break(const Tensor& x, std::uint64_t seed, double amplitude) {
  std::mt19937_64 rng(seed);
  Tensor out = x;
  for (auto& v : out.data()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0,1)
    v += amplitude * (2.0 * u - 1.0);
  }
  return out;
}

}  // namespace mcl
