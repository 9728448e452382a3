#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mcl/backbone.hpp"
#include "mcl/dataset.hpp"
#include "mcl/mc_loss.hpp"
#include "mcl/soft_labels.hpp"

namespace mcl {

enum class Objective { Ce, Mc, Soft };

/// Where training data comes from: a saved dataset root (with train/ and test/)
/// or an inline synthetic spec generated on the fly.
struct DataSource {
  std::string dir;
  std::optional<SyntheticPartsSpec> synthetic;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  double lr0 = 0.1;
  std::vector<std::size_t> schedule{30, 45};
  std::size_t epochs = 60;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Objective objective = Objective::Mc;
  /// Last conv width N; 0 means classes·ξ.
  std::size_t channels = 0;
  McLossConfig mc;
  SoftLabelConfig soft;
  DataSource data;

  void validate() const;
  std::size_t feature_channels(std::size_t classes) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

TrainConfig load_train_config(const std::filesystem::path& path);
/// MC_SEED, when set, replaces cfg.seed.
void apply_env_overrides(TrainConfig& cfg);
/// FNV-1a of the canonical config JSON, 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

/// lr0 · 0.1^(number of schedule epochs ≤ epoch)
double lr_at(std::size_t epoch, const TrainConfig& cfg);

/// p ← p − lr·(g + weight_decay·p). Throws NumericalError naming the first
/// parameter whose gradient is not finite (parameters are left untouched).
void sgd_step(ParameterSet& params, const std::vector<Tensor>& grads, double lr, double weight_decay);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double acc = 0.0;
  double l_ce = 0.0;
  double l_dis = 0.0;
  double l_div = 0.0;
  double l_total = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> rows;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;

  /// epoch,split,acc,l_ce,l_dis,l_div,l_total
  void write_csv(std::ostream& out) const;
  double final_accuracy(const std::string& split = "test") const;
};

struct TrainResult {
  RunMetrics metrics;
  TinyCnn model;
  TinyCnn best_model;
  std::size_t best_epoch = 0;
  double best_accuracy = 0.0;
  std::optional<SoftLabelHead> head;
  /// Soft groups in use at the end of training (soft objective only).
  std::optional<ChannelGroups> soft_groups;
  std::uint64_t mask_draws = 0;
};

using EpochCallback = std::function<void(const EpochMetrics& train, const EpochMetrics& test)>;

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                  const EpochCallback& on_epoch = {});

struct EvalResult {
  double acc = 0.0;
  double l_ce = 0.0;
  Tensor logits;
};

/// Eval-mode forward (running BN statistics), cross-entropy only.
EvalResult evaluate(const TinyCnn& model, const Dataset& ds, std::size_t batch_size = 64);

/// Per-sample SE weights (S,N) of a trained head over a dataset.
Tensor soft_label_weights(const TinyCnn& model, const SoftLabelHead& head, const Dataset& ds,
                          std::size_t batch_size = 64);

/// ReLU(α·A) with α the mean of grad, min-max normalised; all zero when flat.
Tensor gradcam_map(const Tensor& activation, const Tensor& grad);

/// Grad-CAM map of one feature channel for class `cls`: ReLU(α·A) with α the
/// spatial mean of ∂score/∂A, min-max normalised to [0,1]. image is (1,1,S,S).
Tensor channel_heatmap(const TinyCnn& model, const Tensor& image, std::size_t channel, std::size_t cls);

/// channel_heatmap for several channels of one image, sharing one backward pass.
std::vector<Tensor> channel_heatmaps(const TinyCnn& model, const Tensor& image, std::span<const std::size_t> channels,
                                     std::size_t cls);

/// Mean over pairs of Σ_k min(a[k], b[k]) for maps each summing to 1.
double overlap_score(const std::vector<Tensor>& maps);

/// Rescales a non-negative map to sum 1; an all-zero map becomes uniform.
Tensor sum_normalized(const Tensor& map);

/// Mean over the dataset of overlap_score between the heatmaps of the
/// ground-truth class's channel group.
double mean_group_overlap(const TinyCnn& model, const ChannelGroups& groups, const Dataset& ds);

/// Binary PGM (P5) of a [0,1] map.
void write_pgm(const std::filesystem::path& path, const Tensor& map);

/// Artifacts of one run written to root/<config hash>/: config.json,
/// metrics.csv, checkpoint/, best/, summary.json (and top_channels.csv for
/// soft runs).
struct RunArtifacts {
  std::filesystem::path dir;
  TrainResult result;
};

std::pair<Dataset, Dataset> load_data(const DataSource& src);
RunArtifacts run_training(const TrainConfig& cfg, const std::filesystem::path& root,
                          const EpochCallback& on_epoch = {});

const char* objective_name(Objective o);

}  // namespace mcl
