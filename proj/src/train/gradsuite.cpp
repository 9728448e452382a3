#include "mcl/gradsuite.hpp"

#include "mcl/rng.hpp"
#include "mcl/soft_labels.hpp"

namespace mcl {

using ad::Tape;
using ad::Var;

namespace {

Tensor random_input(Shape shape, Rng& rng, double lo, double hi, std::uint64_t tie_seed) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return tie_break(t, tie_seed);
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, double step) {
  Rng rng(seed);
  const std::size_t B = 3, c = 3, xi = 3, N = c * xi;
  const auto groups = ChannelGroups::from(uniform_assignment(c, xi));
  MaskRng mask_rng(derive_seed(seed, 1));
  const MaskSet masks = sample_masks(B, groups, mask_rng);
  std::vector<std::size_t> labels(B);
  for (auto& y : labels) y = rng.index(c);

  const Tensor feats = random_input({B, N, 2, 3}, rng, 0.0, 1.0, seed + 11);
  const Tensor logits = random_input({B, c}, rng, -1.0, 1.0, seed + 12);
  const Tensor group = random_input({xi, 6}, rng, 0.0, 1.0, seed + 13);
  const Tensor weights = random_input({B, N}, rng, 0.05, 0.95, seed + 14);
  const CwaMask frozen = sample_cwa_mask(xi, mask_rng);

  McLossConfig full;
  McLossConfig v2 = full;
  v2.diversity = Diversity::V2;
  McLossConfig soft_mc = full;
  soft_mc.mu = 0.5;

  const SoftLabelHead head = SoftLabelHead::init(N, 4, derive_seed(seed, 2));
  const auto& hp = head.params();
  Tensor a1_b(Shape{hp.get("se.a1.bias").size()});
  for (double& v : a1_b.data()) v = rng.uniform(0.1, 0.5);  // keep the ReLU away from its kink
  const std::vector<Tensor> se_inputs = {feats, logits, hp.get("se.a1.weight"), a1_b, hp.get("se.a2.weight"),
                                         hp.get("se.a2.bias")};
  Tensor probe(Shape{B, N});
  for (double& v : probe.data()) v = rng.uniform(-1.0, 1.0);
  Tensor soft_means(Shape{c, N});
  for (double& v : soft_means.data()) v = rng.uniform();
  const ChannelGroups soft_groups = derive_soft_groups(soft_means, uniform_assignment(c, xi));
  MaskRng soft_rng(derive_seed(seed, 3));
  const MaskSet soft_masks = sample_masks(B, soft_groups, soft_rng);
  const BatchLabelMatrix blm = BatchLabelMatrix::from_labels(labels);
  const SoftLabelConfig soft_cfg{true, 4, false};

  std::vector<GradSuiteEntry> out;
  auto single = [&](const char* name, const ScalarFn& f, const Tensor& x) {
    out.push_back({name, finite_difference_check(f, x, step)});
  };
  auto multi = [&](const char* name, const MultiScalarFn& f, const std::vector<Tensor>& xs) {
    out.push_back({name, finite_difference_check(f, xs, step)});
  };

  single("g_score", [&](Tape&, Var g) { return g_score(g, frozen); }, group);
  single("discriminality_loss", [&](Tape&, Var f) { return discriminality_loss(f, labels, groups, masks, full); }, feats);
  single("diversity_score_h", [&](Tape&, Var g) { return diversity_score_h(g); }, group);
  single("diversity_loss_full", [&](Tape&, Var f) { return diversity_loss(f, groups, full); }, feats);
  single("diversity_loss_v2", [&](Tape&, Var f) { return diversity_loss(f, groups, v2, labels); }, feats);
  single("mc_loss", [&](Tape&, Var f) { return mc_loss(f, labels, groups, masks, full).l_mc; }, feats);
  multi("total_loss",
        [&](Tape&, std::span<const Var> v) { return total_loss(v[1], v[0], labels, groups, masks, full).total; },
        {feats, logits});
  multi("se_forward",
        [&](Tape& t, std::span<const Var> v) {
          return ad::sum(ad::mul(se_forward(v[0], SeVars{v[2], v[3], v[4], v[5]}), t.constant(probe)));
        },
        se_inputs);
  single("l_intra", [&](Tape&, Var w) { return l_intra(w, blm); }, weights);
  single("l_inter", [&](Tape&, Var w) { return l_inter(w, blm); }, weights);
  multi("total_loss_soft",
        [&](Tape&, std::span<const Var> v) {
          const Var w = se_forward(v[0], SeVars{v[2], v[3], v[4], v[5]});
          return total_loss_soft(v[1], v[0], w, labels, soft_groups, soft_masks, soft_mc, soft_cfg).total;
        },
        se_inputs);
  return out;
}

}  // namespace mcl
