#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mcl/tape.hpp"

namespace mcl {

struct GradCheckResult {
  /// max over coordinates of |analytic - central| / max(1, |central|)
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool ok = true;       // false when a NaN/inf showed up
  std::string failure;  // names the offending coordinate when !ok
};

/// Scalar-valued function of several tensors, rebuilt on a fresh tape per call.
/// Must be deterministic (freeze any masks outside the function).
using MultiScalarFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;
using ScalarFn = std::function<ad::Var(ad::Tape&, ad::Var)>;

GradCheckResult finite_difference_check(const MultiScalarFn& f, const std::vector<Tensor>& inputs, double step);
GradCheckResult finite_difference_check(const ScalarFn& f, const Tensor& x, double step);

/// Adds uniform noise in [-amplitude, amplitude] so max/ReLU ties are broken
/// before a finite-difference check.
Tensor tie_break(const Tensor& x, std::uint64_t seed, double amplitude = 1e-3);

}  // namespace mcl
