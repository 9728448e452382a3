#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcl/gradcheck.hpp"

namespace mcl {

struct GradSuiteEntry {
  std::string name;
  GradCheckResult result;
};

/// Central-difference check of every differentiable loss component on
/// tie-broken random inputs with frozen masks.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, double step = 1e-5);

}  // namespace mcl
