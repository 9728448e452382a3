#pragma once

// Mutual-channel loss: channel grouping, channel-wise attention masks,
// cross-channel pooling and the discriminality / diversity objectives.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcl/ops.hpp"

namespace mcl {

/// Contiguous per-class channel ranges exactly tiling [0, channels).
class ChannelAssignment {
 public:
  /// Fixed channel budget: ⌊N/c⌋ channels for the first c·(⌊N/c⌋+1)−N classes,
  /// one more for the rest. Throws std::invalid_argument when N < c.
  static ChannelAssignment solve(std::size_t channels, std::size_t classes);
  /// xi channels per class, N = classes·xi.
  static ChannelAssignment uniform(std::size_t classes, std::size_t xi);

  std::size_t channels() const { return channels_; }
  std::size_t classes() const { return groups_.size(); }
  const ad::Segment& group(std::size_t cls) const { return groups_.at(cls); }
  std::span<const ad::Segment> groups() const { return groups_; }
  std::size_t xi(std::size_t cls) const { return groups_.at(cls).size(); }

  /// Human summary such as "88 classes ×2, 112 classes ×3".
  std::string summary() const;

 private:
  ChannelAssignment(std::size_t channels, std::vector<ad::Segment> groups)
      : channels_(channels), groups_(std::move(groups)) {}

  std::size_t channels_ = 0;
  std::vector<ad::Segment> groups_;
};

inline ChannelAssignment solve_channel_assignment(std::size_t channels, std::size_t classes) {
  return ChannelAssignment::solve(channels, classes);
}
inline ChannelAssignment uniform_assignment(std::size_t classes, std::size_t xi) {
  return ChannelAssignment::uniform(classes, xi);
}

/// Channel members of every class group. Fixed assignments give contiguous,
/// disjoint groups; soft-label grouping may share or skip channels.
struct ChannelGroups {
  std::size_t channels = 0;
  std::vector<std::vector<std::size_t>> members;

  static ChannelGroups from(const ChannelAssignment& a);
  std::size_t classes() const { return members.size(); }
  void validate() const;
};

/// 0/1 weights over the channels of one group: ⌈ξ/2⌉ ones, ⌊ξ/2⌋ zeros.
struct CwaMask {
  std::vector<std::uint8_t> bits;
  std::uint64_t seed = 0;  // seed of the stream that produced it

  std::size_t ones() const;
};

/// Seeded mask stream with a draw counter; draws are reproducible from the seed.
class MaskRng {
 public:
  explicit MaskRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }
  /// Uniform integer in [0, n) by rejection, independent of the standard library.
  std::size_t uniform_index(std::size_t n);

 private:
  std::uint64_t next();

  std::uint64_t seed_;
  std::uint64_t state_;
  std::uint64_t draws_ = 0;
};

CwaMask sample_cwa_mask(std::size_t xi, MaskRng& rng);
CwaMask unit_mask(std::size_t xi);

/// masks[sample][group]
using MaskSet = std::vector<std::vector<CwaMask>>;
MaskSet sample_masks(std::size_t batch, const ChannelGroups& groups, MaskRng& rng);
MaskSet unit_masks(std::size_t batch, const ChannelGroups& groups);

enum class Pooling { Ccmp, Ccap };
enum class Diversity { Full, V2, Off };

struct McLossConfig {
  double mu = 1.5;
  double lambda = 10.0;
  /// Channels per class; 0 selects the fixed-budget assignment ("table2").
  std::size_t xi = 3;
  Pooling pooling = Pooling::Ccmp;
  Diversity diversity = Diversity::Full;
  bool cwa = true;
  bool training_mode = true;

  void validate() const;
  bool uniform_xi() const { return xi != 0; }
};

void to_json(nlohmann::json& j, const McLossConfig& c);
void from_json(const nlohmann::json& j, McLossConfig& c);

/// Assignment implied by the config for a backbone with `channels` outputs.
ChannelAssignment make_assignment(const McLossConfig& cfg, std::size_t classes, std::size_t channels);

// Single-group building blocks; group has shape (ξ, WH).
ad::Var ccmp(ad::Var group);
ad::Var ccap(ad::Var group);
ad::Var gap(ad::Var v);
ad::Var g_score(ad::Var group, const CwaMask& mask, Pooling pooling = Pooling::Ccmp);
ad::Var spatial_softmax(ad::Var channel);
/// Σ_k max_j softmax(group_j)[k]; lies in [1, ξ].
ad::Var diversity_score_h(ad::Var group);

/// Features F of shape (B,N,W,H) or (B,N,WH). Masks are constants; ignored when cfg.cwa is off.
ad::Var discriminality_loss(ad::Var features, std::span<const std::size_t> labels, const ChannelGroups& groups,
                            const MaskSet& masks, const McLossConfig& cfg);

/// Per-sample mean of h over groups (FULL) or h of the labelled group (V2), then
/// batch mean. OFF yields a constant 0. Labels may be empty unless V2.
ad::Var diversity_loss(ad::Var features, const ChannelGroups& groups, const McLossConfig& cfg,
                       std::span<const std::size_t> labels = {});

/// L_dis − λ·L_div
ad::Var combine_mc(ad::Var l_dis, ad::Var l_div, double lambda);
/// L_CE + μ·L_MC
ad::Var combine_total(ad::Var l_ce, ad::Var l_mc, double mu);

struct McLossTerms {
  ad::Var l_mc;
  ad::Var l_dis;
  ad::Var l_div;
};

/// L_MC = L_dis − λ·L_div. Requires cfg.training_mode.
McLossTerms mc_loss(ad::Var features, std::span<const std::size_t> labels, const ChannelGroups& groups,
                    const MaskSet& masks, const McLossConfig& cfg);

struct LossBreakdown {
  ad::Var total;
  ad::Var l_ce;
  double ce = 0.0;
  double dis = 0.0;
  double div = 0.0;
  double mc = 0.0;
  double value = 0.0;
  bool mc_evaluated = false;
};

/// L = L_CE + μ·L_MC in training mode, L = L_CE otherwise (MC branch skipped).
LossBreakdown total_loss(ad::Var logits, ad::Var features, std::span<const std::size_t> labels,
                         const ChannelGroups& groups, const MaskSet& masks, const McLossConfig& cfg);

/// Process-wide count of mc_loss() evaluations.
std::uint64_t mc_branch_evaluations();

}  // namespace mcl
