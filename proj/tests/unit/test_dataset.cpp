#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "mcl/dataset.hpp"

using namespace mcl;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mcl_test_dataset_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

SyntheticPartsSpec small_spec() {
  SyntheticPartsSpec s;
  s.classes = 4;
  s.train_samples = 40;
  s.test_samples = 20;
  return s;
}

// Does glyph g appear verbatim anywhere in image i?
bool contains(const Dataset& ds, std::size_t i, const Tensor& g) {
  const std::size_t S = ds.images.dim(2), k = g.dim(0);
  const double* img = ds.images.data().data() + i * S * S;
  for (std::size_t y = 0; y + k <= S; ++y)
    for (std::size_t x = 0; x + k <= S; ++x) {
      bool match = true;
      for (std::size_t a = 0; a < k && match; ++a)
        for (std::size_t b = 0; b < k && match; ++b) match = img[(y + a) * S + x + b] == g[a * k + b];
      if (match) return true;
    }
  return false;
}

}  // namespace

TEST(SyntheticParts, RejectsInfeasibleGeometry) {
  SyntheticPartsSpec s;
  s.layout = SyntheticPartsSpec::Layout::Uniform;
  s.image_size = 12;
  s.glyph_size = 5;
  try {
    s.validate();
    FAIL() << "3 glyphs of 25 px accepted in a 12x12 image";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("0.25"), std::string::npos) << e.what();
  }
  s.image_size = 18;
  EXPECT_NO_THROW(s.validate());
}

TEST(SyntheticParts, NoiselessSamplesContainEveryClassGlyph) {
  for (auto layout : {SyntheticPartsSpec::Layout::Uniform, SyntheticPartsSpec::Layout::Slots}) {
    auto s = small_spec();
    s.noise = 0.0;
    s.layout = layout;
    const auto d = synth_generate(s, 3);
    for (const Dataset* ds : {&d.train, &d.test})
      for (std::size_t i = 0; i < ds->size(); ++i)
        for (std::size_t p = 0; p < s.parts_per_class; ++p)
          ASSERT_TRUE(contains(*ds, i, d.glyphs[ds->labels[i] * s.parts_per_class + p]))
              << ds->split << " sample " << i << " part " << p;
  }
}

TEST(SyntheticParts, GlyphsAreDistinctAcrossClasses) {
  auto s = small_spec();
  s.classes = 8;
  for (std::size_t flips : {0u, 2u}) {
    s.glyph_flips = flips;
    const auto d = synth_generate(s, 11);
    ASSERT_EQ(d.glyphs.size(), 24u);
    for (std::size_t a = 0; a < d.glyphs.size(); ++a)
      for (std::size_t b = a + 1; b < d.glyphs.size(); ++b) EXPECT_FALSE(d.glyphs[a] == d.glyphs[b]) << a << "," << b;
  }
}

TEST(SyntheticParts, PixelsInUnitIntervalAndLabelsBalanced) {
  auto s = small_spec();
  s.noise = 0.3;
  s.train_samples = 43;
  const auto d = synth_generate(s, 2);
  for (const Dataset* ds : {&d.train, &d.test}) {
    for (double v : ds->images.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    std::vector<std::size_t> count(s.classes, 0);
    for (auto l : ds->labels) ++count[l];
    const auto [lo, hi] = std::minmax_element(count.begin(), count.end());
    EXPECT_LE(*hi - *lo, 1u) << ds->split;
  }
}

TEST(SyntheticParts, SeedDeterminesEverything) {
  const auto s = small_spec();
  const auto a = synth_generate(s, 9), b = synth_generate(s, 9), c = synth_generate(s, 10);
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_FALSE(a.train.images == c.train.images);
  // train and test are independent draws
  EXPECT_FALSE(a.train.gather(std::vector<std::size_t>{0}) == a.test.gather(std::vector<std::size_t>{0}));

  const auto d1 = scratch("det1"), d2 = scratch("det2");
  save_synthetic(d1, a);
  save_synthetic(d2, b);
  for (const char* f : {"train/images.mct", "train/labels.csv", "test/images.mct", "test/spec.json"})
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
}

TEST(SyntheticParts, SlotLayoutKeepsPartsInTheirCells) {
  auto s = small_spec();
  s.layout = SyntheticPartsSpec::Layout::Slots;
  s.noise = 0.0;
  const auto d = synth_generate(s, 4);
  const std::size_t S = s.image_size, cell = S / s.slot_grid();
  // cell 3 of a 2x2 grid is never used with three parts
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t y = cell; y < S; ++y)
      for (std::size_t x = cell; x < S; ++x) ASSERT_EQ(d.train.images[i * S * S + y * S + x], 0.0);
}

TEST(DatasetIo, RoundTrip) {
  const auto d = synth_generate(small_spec(), 5);
  const auto dir = scratch("rt");
  save_dataset(dir, d.train);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.images, d.train.images);
  EXPECT_EQ(back.labels, d.train.labels);
  EXPECT_EQ(back.classes, d.train.classes);
  EXPECT_EQ(back.split, "train");
}

TEST(DatasetIo, TruncatedImagesNameByteCounts) {
  const auto d = synth_generate(small_spec(), 5);
  const auto dir = scratch("trunc");
  save_dataset(dir, d.train);
  const auto full = std::filesystem::file_size(dir / "images.mct");
  std::filesystem::resize_file(dir / "images.mct", full - 8);
  try {
    load_dataset(dir);
    FAIL() << "truncated file accepted";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected " + std::to_string(full)), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(full - 8)), std::string::npos) << msg;
  }
}

TEST(DatasetIo, BadMagicRejected) {
  const auto d = synth_generate(small_spec(), 5);
  const auto dir = scratch("magic");
  save_dataset(dir, d.train);
  {
    std::fstream f(dir / "images.mct", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XCT1", 4);
  }
  try {
    load_dataset(dir);
    FAIL() << "bad magic accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
}

TEST(DatasetIo, LabelOutOfRangeRejected) {
  const auto d = synth_generate(small_spec(), 5);
  const auto dir = scratch("label");
  save_dataset(dir, d.train);
  std::string csv = slurp(dir / "labels.csv");
  const auto row = csv.find("\n0,");
  ASSERT_NE(row, std::string::npos);
  csv.replace(row + 3, csv.find('\n', row + 1) - (row + 3), "4");  // c = 4
  std::ofstream(dir / "labels.csv", std::ios::trunc) << csv;
  try {
    load_dataset(dir);
    FAIL() << "label 4 accepted for 4 classes";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("label 4 out of range [0, 4)"), std::string::npos) << e.what();
  }

  std::ofstream(dir / "labels.csv", std::ios::trunc) << "index,label\n0,1\n";
  EXPECT_THROW(load_dataset(dir), FormatError);
  std::ofstream(dir / "labels.csv", std::ios::trunc) << "sample_index,label\n1,1\n";
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(DatasetIo, NearestCentroidOnSeparableToyData) {
  Dataset train, test;
  train.classes = test.classes = 2;
  train.images = Tensor(Shape{2, 1, 1, 1}, {0.0, 1.0});
  train.labels = {0, 1};
  test.images = Tensor(Shape{3, 1, 1, 1}, {0.1, 0.9, 0.6});
  test.labels = {0, 1, 0};
  EXPECT_DOUBLE_EQ(nearest_centroid_accuracy(train, test), 2.0 / 3.0);
}

TEST(DatasetIo, DefaultTaskDefeatsRawPixelCentroids) {
  // difficulty calibration: class parts move around, so raw-pixel templates fail
  SyntheticPartsSpec s;
  s.train_samples = 200;
  const auto d = synth_generate(s, 1);
  EXPECT_LT(nearest_centroid_accuracy(d.train, d.test), 0.60);
}
