#pragma once

// Learnable per-sample channel importance (squeeze-and-excitation head) and the
// label losses that shape it.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mcl/mc_loss.hpp"
#include "mcl/params.hpp"

namespace mcl {

struct SoftLabelConfig {
  bool enabled = false;
  std::size_t reduction = 4;
  /// Flips the sign of L_intra (experimental; off reproduces the printed objective).
  bool negate_intra = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const SoftLabelConfig& c);
void from_json(const nlohmann::json& j, SoftLabelConfig& c);

/// Parameters of the SE head: se.a1.weight (H,N), se.a1.bias (H),
/// se.a2.weight (N,H), se.a2.bias (N), with H = max(1, N / reduction).
class SoftLabelHead {
 public:
  static SoftLabelHead init(std::size_t channels, std::size_t reduction, std::uint64_t seed);
  /// Wraps existing parameters; validates names and shapes.
  static SoftLabelHead from_params(ParameterSet params);

  std::size_t channels() const { return channels_; }
  std::size_t hidden() const { return hidden_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

 private:
  SoftLabelHead(std::size_t channels, std::size_t hidden, ParameterSet params)
      : channels_(channels), hidden_(hidden), params_(std::move(params)) {}

  std::size_t channels_ = 0;
  std::size_t hidden_ = 0;
  ParameterSet params_;
};

/// Head parameters recorded on a tape.
struct SeVars {
  ad::Var a1_w, a1_b, a2_w, a2_b;

  static SeVars bind(ad::Tape& tape, const SoftLabelHead& head, bool trainable = true);
};

/// w = sigmoid(A2·relu(A1·GAP(F))) for features (B,N,...); returns (B,N).
ad::Var se_forward(ad::Var features, const SeVars& head);

/// Batch rows grouped by class: rows order[segments[i]] all carry classes[i].
struct BatchLabelMatrix {
  std::vector<std::size_t> classes;
  std::vector<std::size_t> order;
  std::vector<ad::Segment> segments;

  static BatchLabelMatrix from_labels(std::span<const std::size_t> labels);
  std::size_t represented() const { return classes.size(); }
};

/// (1/C)·Σ_i Σ_k max_j W_i[j,k] over weights (B,N).
ad::Var l_intra(ad::Var weights, const BatchLabelMatrix& m);
/// −Σ_k max_i max_j W_i[j,k].
ad::Var l_inter(ad::Var weights, const BatchLabelMatrix& m);

/// L_CE + μ·L_MC + L_intra + L_inter
ad::Var combine_soft(ad::Var l_ce, ad::Var l_mc, ad::Var l_intra, ad::Var l_inter, double mu);

struct SoftLossBreakdown {
  ad::Var total;
  double ce = 0.0;
  double dis = 0.0;
  double div = 0.0;
  double mc = 0.0;
  double intra = 0.0;
  double inter = 0.0;
  double value = 0.0;
};

/// Full soft-label objective; the MC term runs over `soft_groups`.
SoftLossBreakdown total_loss_soft(ad::Var logits, ad::Var features, ad::Var weights,
                                  std::span<const std::size_t> labels, const ChannelGroups& soft_groups,
                                  const MaskSet& masks, const McLossConfig& mc, const SoftLabelConfig& soft);

/// Per-class mean of per-sample weights (S,N). Rows of absent classes are zero
/// and their count is 0.
struct ClassMeanWeights {
  Tensor mean;  // (c, N)
  std::vector<std::size_t> counts;
};
ClassMeanWeights class_mean_weights(const Tensor& weights, std::span<const std::size_t> labels, std::size_t classes);

/// Top-ξ_i channels per class by class-mean weight, descending, ties by lower
/// index. Channels may be shared or left unassigned.
ChannelGroups derive_soft_groups(const Tensor& class_mean, const ChannelAssignment& sizes);

struct ClassRanking {
  std::size_t class_id = 0;
  std::vector<std::size_t> channels;
  std::vector<double> weights;
};

struct TopChannelReport {
  std::vector<ClassRanking> rows;
  std::vector<std::string> warnings;

  /// Fraction of represented class pairs whose top-1 channels differ.
  double top1_separation() const;
  /// class_id,rank,channel_index,mean_weight
  void write_csv(std::ostream& out) const;
};

TopChannelReport top_channels_report(const ClassMeanWeights& means, std::size_t k);

}  // namespace mcl
