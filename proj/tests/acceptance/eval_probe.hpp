#pragma once

// The same eval routine compiled twice: once with the mutual-channel branch
// wired into the loss computation and once without it.

#include <cstdint>

#include "mcl/train.hpp"

namespace mcl::probe {

struct ProbeResult {
  Tensor logits;
  double loss = 0.0;
  std::uint64_t mask_draws = 0;
  std::uint64_t mc_evaluations = 0;
};

ProbeResult eval_with_mc(const TinyCnn& model, const Dataset& ds, const McLossConfig& mc);
ProbeResult eval_without_mc(const TinyCnn& model, const Dataset& ds, const McLossConfig& mc);

}  // namespace mcl::probe
