#pragma once

// Paired ablation variants and the default desk-scale experiment.

#include <string>
#include <vector>

#include "mcl/train.hpp"

namespace mcl {

struct AblationVariant {
  std::string name;
  TrainConfig cfg;
};

/// Default synthetic experiment: c=8, ξ=3, μ=1.5, λ=10.
TrainConfig desk_config();

/// Variants of `base` differing in one switch each; seed and data are shared.
/// Names: "MC-Loss", "CE only", "MC xi=1", "no L_div", "no CWA", "MC-Loss-V2",
/// "CCAP", "soft labels".
std::vector<AblationVariant> ablation_variants(const TrainConfig& base, std::size_t classes);

/// The variant called `name`; throws std::invalid_argument if unknown.
TrainConfig ablation_variant(const TrainConfig& base, std::size_t classes, const std::string& name);

}  // namespace mcl
