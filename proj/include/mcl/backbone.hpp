#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "mcl/ops.hpp"
#include "mcl/params.hpp"

namespace mcl {

struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

/// Conv stack (each conv → batch norm → ReLU) followed by an affine head over
/// the flattened last feature map F. The last conv emits N channels.
struct TinyCnnConfig {
  std::size_t input_size = 32;
  std::size_t in_channels = 1;
  std::vector<ConvSpec> convs;
  std::size_t classes = 8;
  bool batch_norm = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  /// Desk default: widths [8, 16, N], strides [1, 2, 2], 3×3 kernels, padding 1.
  static TinyCnnConfig desk(std::size_t classes, std::size_t channels, std::size_t input_size = 32);

  std::size_t feature_channels() const { return convs.back().out_channels; }
  /// Spatial extent after conv `layer` (inclusive); 0 when it collapses.
  std::size_t extent_after(std::size_t layer) const;
  std::size_t feature_extent() const { return extent_after(convs.size() - 1); }
  void validate() const;
};

void to_json(nlohmann::json& j, const TinyCnnConfig& c);
void from_json(const nlohmann::json& j, TinyCnnConfig& c);

struct ForwardResult {
  ad::Var features;  // (B, N, W, H), post-ReLU
  ad::Var logits;    // (B, classes)
  std::vector<ad::BatchStats> stats;
};

class TinyCnn {
 public:
  /// Deterministic initialisation: He-uniform conv kernels, 1/sqrt(fan_in)
  /// uniform head weights, zero biases, unit BN scale.
  static TinyCnn build(const TinyCnnConfig& cfg, std::uint64_t seed);

  const TinyCnnConfig& config() const { return cfg_; }
  /// Trainable tensors, in a fixed order.
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  /// Batch-norm running statistics.
  const ParameterSet& buffers() const { return buffers_; }
  ParameterSet& buffers() { return buffers_; }

  /// `params` are bound in params() order. Training mode normalises with batch
  /// statistics; eval mode uses the running statistics as constants.
  ForwardResult forward(ad::Var input, std::span<const ad::Var> params, bool training) const;
  /// Affine head over flattened features (B,N,W,H).
  ad::Var head(ad::Var features, std::span<const ad::Var> params) const;
  /// Momentum update of running mean and unbiased running variance.
  void update_running_stats(const std::vector<ad::BatchStats>& stats, std::size_t batch);

 private:
  TinyCnnConfig cfg_;
  ParameterSet params_;
  ParameterSet buffers_;
};

/// Checkpoint: every tensor appended to `tensors.mct` as an MCT1 record plus
/// `manifest.json` listing name, shape and byte offset.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<const ParameterSet*>& sets);
ParameterSet load_checkpoint(const std::filesystem::path& dir);

}  // namespace mcl
