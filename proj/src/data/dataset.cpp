#include "mcl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "mcl/rng.hpp"

namespace mcl {

void SyntheticPartsSpec::validate() const {
  if (classes < 1) throw std::invalid_argument("classes must be >= 1");
  if (parts_per_class < 1) throw std::invalid_argument("parts_per_class must be >= 1");
  if (glyph_size < 2 || glyph_size > image_size) throw std::invalid_argument("glyph_size must lie in [2, image_size]");
  if (!(noise >= 0) || !std::isfinite(noise)) throw std::invalid_argument("noise must be finite and >= 0");
  if (train_samples < classes || test_samples < classes)
    throw std::invalid_argument("each split needs at least one sample per class");
  if (foreign_parts > 0 && classes < 2) throw std::invalid_argument("foreign parts need at least two classes");
  if (glyph_flips > glyph_size * glyph_size) throw std::invalid_argument("glyph_flips exceeds the glyph area");
  const std::size_t used = glyphs_per_image() * glyph_size * glyph_size;
  const double budget = 0.25 * static_cast<double>(image_size * image_size);
  if (static_cast<double>(used) > budget) {
    std::ostringstream os;
    os << "infeasible geometry: glyphs_per_image*glyph_area = " << glyphs_per_image() << "*"
       << glyph_size * glyph_size << " = " << used << " exceeds 0.25*S^2 = " << budget;
    throw std::invalid_argument(os.str());
  }
  if (layout == Layout::Slots) {
    const std::size_t cell = image_size / slot_grid();
    const std::size_t per_cell = 1 + foreign_parts;
    if (cell < glyph_size || 4 * per_cell * glyph_size * glyph_size > cell * cell)
      throw std::invalid_argument("infeasible geometry: slot cells of " + std::to_string(cell) + "px cannot hold " +
                                  std::to_string(per_cell) + " glyphs of " + std::to_string(glyph_size) + "px");
  }
}

std::size_t SyntheticPartsSpec::slot_grid() const {
  std::size_t g = 1;
  while (g * g < parts_per_class) ++g;
  return g;
}

void to_json(nlohmann::json& j, const SyntheticPartsSpec& s) {
  j = nlohmann::json{{"classes", s.classes},
                     {"parts_per_class", s.parts_per_class},
                     {"image_size", s.image_size},
                     {"glyph_size", s.glyph_size},
                     {"noise", s.noise},
                     {"train_samples", s.train_samples},
                     {"test_samples", s.test_samples},
                     {"glyph_flips", s.glyph_flips},
                     {"foreign_parts", s.foreign_parts},
                     {"layout", s.layout == SyntheticPartsSpec::Layout::Slots ? "slots" : "uniform"}};
}

void from_json(const nlohmann::json& j, SyntheticPartsSpec& s) {
  SyntheticPartsSpec o;
  o.classes = j.value("classes", o.classes);
  o.parts_per_class = j.value("parts_per_class", o.parts_per_class);
  o.image_size = j.value("image_size", o.image_size);
  o.glyph_size = j.value("glyph_size", o.glyph_size);
  o.noise = j.value("noise", o.noise);
  o.train_samples = j.value("train_samples", o.train_samples);
  o.test_samples = j.value("test_samples", o.test_samples);
  o.glyph_flips = j.value("glyph_flips", o.glyph_flips);
  o.foreign_parts = j.value("foreign_parts", o.foreign_parts);
  const std::string layout =
      j.value("layout", std::string(o.layout == SyntheticPartsSpec::Layout::Slots ? "slots" : "uniform"));
  if (layout == "slots")
    o.layout = SyntheticPartsSpec::Layout::Slots;
  else if (layout != "uniform")
    throw std::invalid_argument("unknown layout '" + layout + "'");
  o.validate();
  s = o;
}

void Dataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != labels.size() || images.dim(1) != 1 || images.dim(2) != images.dim(3))
    throw ShapeError("dataset images must be (B,1,S,S) with one label each, got " + shape_str(images.shape()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= classes)
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                                  " out of range [0, " + std::to_string(classes) + ")");
}

Tensor Dataset::gather(std::span<const std::size_t> rows) const {
  const std::size_t per = images.dim(2) * images.dim(3);
  Tensor out(Shape{rows.size(), 1, images.dim(2), images.dim(3)});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = images.data().subspan(rows[r] * per, per);
    std::copy(src.begin(), src.end(), out.data().begin() + r * per);
  }
  return out;
}

namespace {

enum Stream : std::uint64_t { kGlyphs = 0, kTrain = 1, kTest = 2 };

Tensor random_glyph(std::size_t g, Rng& rng) {
  // at least a quarter of the pixels lit so glyphs stay visible
  for (;;) {
    Tensor t(Shape{g, g});
    std::size_t lit = 0;
    for (double& v : t.data()) {
      v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      lit += v > 0;
    }
    if (lit * 4 >= g * g) return t;
  }
}

std::vector<Tensor> make_glyphs(const SyntheticPartsSpec& spec, Rng& rng) {
  const std::size_t g = spec.glyph_size;
  std::vector<Tensor> bases;
  for (std::size_t p = 0; p < spec.parts_per_class; ++p) bases.push_back(random_glyph(g, rng));
  std::vector<Tensor> glyphs;
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t p = 0; p < spec.parts_per_class; ++p) {
      for (;;) {
        Tensor cand;
        if (spec.glyph_flips == 0) {
          cand = random_glyph(g, rng);
        } else {
          cand = bases[p];
          std::vector<std::size_t> pos(g * g);
          for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
          rng.shuffle(pos.begin(), pos.end());
          for (std::size_t f = 0; f < spec.glyph_flips; ++f) cand[pos[f]] = 1.0 - cand[pos[f]];
        }
        if (std::find(glyphs.begin(), glyphs.end(), cand) == glyphs.end()) {
          glyphs.push_back(std::move(cand));
          break;
        }
      }
    }
  return glyphs;
}

struct Placement {
  std::size_t y, x;
};

struct Region {
  std::size_t y0, x0, extent;  // square region
};

std::vector<Placement> place(const std::vector<Region>& regions, std::size_t g, Rng& rng) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<Placement> out;
    bool ok = true;
    for (std::size_t i = 0; i < regions.size() && ok; ++i) {
      const Region& r = regions[i];
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        const Placement p{r.y0 + rng.index(r.extent - g + 1), r.x0 + rng.index(r.extent - g + 1)};
        bool clash = false;
        for (const auto& q : out)
          if (p.y < q.y + g && q.y < p.y + g && p.x < q.x + g && q.x < p.x + g) clash = true;
        if (!clash) {
          out.push_back(p);
          placed = true;
        }
      }
      ok = placed;
    }
    if (ok) return out;
  }
  throw std::runtime_error("could not place glyphs without overlap");
}

Dataset render_split(const SyntheticPartsSpec& spec, const std::vector<Tensor>& glyphs, std::size_t n,
                     const std::string& split, Rng& rng) {
  const std::size_t S = spec.image_size, g = spec.glyph_size, P = spec.parts_per_class;
  Dataset ds;
  ds.classes = spec.classes;
  ds.split = split;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = i % spec.classes;
  rng.shuffle(ds.labels.begin(), ds.labels.end());
  ds.images = Tensor(Shape{n, 1, S, S});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = ds.labels[i];
    std::vector<const Tensor*> items;
    std::vector<std::size_t> slots;
    for (std::size_t p = 0; p < P; ++p) {
      items.push_back(&glyphs[cls * P + p]);
      slots.push_back(p);
    }
    for (std::size_t f = 0; f < spec.foreign_parts; ++f) {
      std::size_t other = rng.index(spec.classes - 1);
      if (other >= cls) ++other;
      const std::size_t p = rng.index(P);
      items.push_back(&glyphs[other * P + p]);
      slots.push_back(p);
    }
    std::vector<Region> regions;
    for (std::size_t slot : slots) {
      if (spec.layout == SyntheticPartsSpec::Layout::Uniform) {
        regions.push_back({0, 0, S});
      } else {
        const std::size_t grid = spec.slot_grid(), cell = S / grid;
        regions.push_back({(slot / grid) * cell, (slot % grid) * cell, cell});
      }
    }
    const auto where = place(regions, g, rng);
    double* img = ds.images.data().data() + i * S * S;
    for (std::size_t k = 0; k < items.size(); ++k)
      for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) img[(where[k].y + y) * S + where[k].x + x] = (*items[k])[y * g + x];
    if (spec.noise > 0)
      for (std::size_t p = 0; p < S * S; ++p) img[p] = std::clamp(img[p] + spec.noise * rng.normal(), 0.0, 1.0);
  }
  return ds;
}

}  // namespace

SyntheticData synth_generate(const SyntheticPartsSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticData out;
  out.spec = spec;
  out.seed = seed;
  Rng glyph_rng(derive_seed(seed, kGlyphs));
  out.glyphs = make_glyphs(spec, glyph_rng);
  Rng train_rng(derive_seed(seed, kTrain));
  out.train = render_split(spec, out.glyphs, spec.train_samples, "train", train_rng);
  Rng test_rng(derive_seed(seed, kTest));
  out.test = render_split(spec, out.glyphs, spec.test_samples, "test", test_rng);
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const nlohmann::json& meta) {
  ds.validate();
  std::filesystem::create_directories(dir);
  save_mct(dir / "images.mct", ds.images);
  std::ofstream csv(dir / "labels.csv", std::ios::trunc);
  csv << "sample_index,label\n";
  for (std::size_t i = 0; i < ds.labels.size(); ++i) csv << i << ',' << ds.labels[i] << '\n';
  if (!csv) throw std::runtime_error("cannot write " + (dir / "labels.csv").string());
  nlohmann::json spec = meta.is_object() ? meta : nlohmann::json::object();
  spec["classes"] = ds.classes;
  spec["split"] = ds.split;
  spec["samples"] = ds.labels.size();
  std::ofstream js(dir / "spec.json", std::ios::trunc);
  js << spec.dump(2) << '\n';
  if (!js) throw std::runtime_error("cannot write " + (dir / "spec.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream js(dir / "spec.json");
  if (!js) throw std::runtime_error("cannot open " + (dir / "spec.json").string());
  const nlohmann::json spec = nlohmann::json::parse(js);
  Dataset ds;
  ds.classes = spec.at("classes").get<std::size_t>();
  ds.split = spec.value("split", std::string());
  ds.images = load_mct(dir / "images.mct");

  const auto csv_path = (dir / "labels.csv").string();
  std::ifstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open " + csv_path);
  std::string line;
  if (!std::getline(csv, line) || line != "sample_index,label")
    throw FormatError(csv_path + ": expected header 'sample_index,label'");
  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t idx = 0;
    long long label = -1;
    char comma = 0;
    std::istringstream is(line);
    if (!(is >> idx >> comma >> label) || comma != ',' || !(is >> std::ws).eof())
      throw FormatError(csv_path + ":" + std::to_string(lineno) + ": malformed row '" + line + "'");
    if (idx != ds.labels.size())
      throw FormatError(csv_path + ":" + std::to_string(lineno) + ": expected sample_index " +
                        std::to_string(ds.labels.size()) + ", got " + std::to_string(idx));
    if (label < 0 || static_cast<std::size_t>(label) >= ds.classes)
      throw FormatError(csv_path + ":" + std::to_string(lineno) + ": label " + std::to_string(label) +
                        " out of range [0, " + std::to_string(ds.classes) + ")");
    ds.labels.push_back(static_cast<std::size_t>(label));
  }
  if (ds.images.rank() != 4 || ds.images.dim(0) != ds.labels.size())
    throw FormatError(dir.string() + ": " + std::to_string(ds.labels.size()) + " labels for images " +
                      shape_str(ds.images.shape()));
  ds.validate();
  return ds;
}

void save_synthetic(const std::filesystem::path& root, const SyntheticData& data) {
  nlohmann::json meta;
  meta["generator"] = data.spec;
  meta["seed"] = data.seed;
  save_dataset(root / "train", data.train, meta);
  save_dataset(root / "test", data.test, meta);
}

double nearest_centroid_accuracy(const Dataset& train, const Dataset& test) {
  const std::size_t per = train.images.size() / train.size();
  std::vector<double> centroid(train.classes * per, 0.0);
  std::vector<std::size_t> count(train.classes, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    ++count[train.labels[i]];
    for (std::size_t p = 0; p < per; ++p) centroid[train.labels[i] * per + p] += train.images[i * per + p];
  }
  for (std::size_t c = 0; c < train.classes; ++c)
    for (std::size_t p = 0; p < per; ++p) centroid[c * per + p] /= static_cast<double>(std::max<std::size_t>(1, count[c]));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < train.classes; ++c) {
      if (count[c] == 0) continue;
      double d = 0.0;
      for (std::size_t p = 0; p < per; ++p) {
        const double e = test.images[i * per + p] - centroid[c * per + p];
        d += e * e;
      }
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    correct += arg == test.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace mcl
