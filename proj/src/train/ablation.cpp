#include "mcl/ablation.hpp"

#include <stdexcept>

namespace mcl {

TrainConfig desk_config() {
  TrainConfig c;
  c.objective = Objective::Mc;
  c.mc.mu = 1.5;
  c.mc.lambda = 10.0;
  c.mc.xi = 3;
  SyntheticPartsSpec s;
  c.data.synthetic = s;
  c.data.seed = 1;
  return c;
}

std::vector<AblationVariant> ablation_variants(const TrainConfig& base, std::size_t classes) {
  std::vector<AblationVariant> out;
  auto add = [&](const char* name, auto&& edit) {
    TrainConfig c = base;
    edit(c);
    c.validate();
    out.push_back({name, c});
  };
  // CE keeps the MC backbone width so the pair differs only in the loss
  const std::size_t n = base.feature_channels(classes);
  add("MC-Loss", [](TrainConfig& c) { c.objective = Objective::Mc; });
  add("CE only", [&](TrainConfig& c) {
    c.objective = Objective::Ce;
    c.channels = n;
  });
  add("MC xi=1", [](TrainConfig& c) {
    c.objective = Objective::Mc;
    c.mc.xi = 1;
    c.channels = 0;
  });
  add("no L_div", [](TrainConfig& c) {
    c.objective = Objective::Mc;
    c.mc.diversity = Diversity::Off;
  });
  add("no CWA", [](TrainConfig& c) {
    c.objective = Objective::Mc;
    c.mc.cwa = false;
  });
  add("MC-Loss-V2", [](TrainConfig& c) {
    c.objective = Objective::Mc;
    c.mc.diversity = Diversity::V2;
  });
  add("CCAP", [](TrainConfig& c) {
    c.objective = Objective::Mc;
    c.mc.pooling = Pooling::Ccap;
  });
  add("soft labels", [](TrainConfig& c) {
    c.objective = Objective::Soft;
    c.soft.enabled = true;
    c.mc.mu = 0.5;
  });
  return out;
}

TrainConfig ablation_variant(const TrainConfig& base, std::size_t classes, const std::string& name) {
  for (auto& v : ablation_variants(base, classes))
    if (v.name == name) return v.cfg;
  throw std::invalid_argument("unknown ablation variant '" + name + "'");
}

}  // namespace mcl
