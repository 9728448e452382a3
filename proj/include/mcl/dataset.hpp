#pragma once

// Synthetic "localized parts" images and their on-disk format.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

/// Every image of class i carries that class's parts_per_class glyphs at
/// random non-overlapping positions on a dark background.
struct SyntheticPartsSpec {
  std::size_t classes = 8;
  std::size_t parts_per_class = 3;
  std::size_t image_size = 32;
  std::size_t glyph_size = 5;
  /// Std of additive Gaussian pixel noise (values are clamped to [0,1]).
  double noise = 0.1;
  std::size_t train_samples = 1600;
  std::size_t test_samples = 400;
  /// Pixels flipped from a per-slot base glyph to make each class's glyph;
  /// 0 draws every glyph independently.
  std::size_t glyph_flips = 1;
  /// Parts borrowed from other classes and planted as distractors per image.
  std::size_t foreign_parts = 0;
  /// Uniform: anywhere in the image. Slots: the image is split into a grid of
  /// cells and part j (of any class) lands at a random position inside cell j.
  enum class Layout { Uniform, Slots } layout = Layout::Slots;

  void validate() const;
  std::size_t glyphs_per_image() const { return parts_per_class + foreign_parts; }
  /// Cells per side of the slot grid.
  std::size_t slot_grid() const;
};

void to_json(nlohmann::json& j, const SyntheticPartsSpec& s);
void from_json(const nlohmann::json& j, SyntheticPartsSpec& s);

struct Dataset {
  Tensor images;  // (B, 1, S, S)
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  /// Images of the given rows, (rows.size(), 1, S, S).
  Tensor gather(std::span<const std::size_t> rows) const;
};

struct SyntheticData {
  SyntheticPartsSpec spec;
  std::uint64_t seed = 0;
  /// glyphs[class * parts_per_class + part], each (glyph_size, glyph_size) in {0,1}.
  std::vector<Tensor> glyphs;
  Dataset train;
  Dataset test;
};

SyntheticData synth_generate(const SyntheticPartsSpec& spec, std::uint64_t seed);

/// images.mct, labels.csv (sample_index,label) and spec.json under `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const nlohmann::json& meta = {});
Dataset load_dataset(const std::filesystem::path& dir);

/// root/train and root/test.
void save_synthetic(const std::filesystem::path& root, const SyntheticData& data);

/// Raw-pixel nearest class-centroid classifier; returns test accuracy.
double nearest_centroid_accuracy(const Dataset& train, const Dataset& test);

}  // namespace mcl
