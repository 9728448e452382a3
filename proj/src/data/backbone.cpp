#include "mcl/backbone.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "mcl/rng.hpp"

namespace mcl {

using ad::Var;

TinyCnnConfig TinyCnnConfig::desk(std::size_t classes, std::size_t channels, std::size_t input_size) {
  TinyCnnConfig c;
  c.input_size = input_size;
  c.classes = classes;
  c.convs = {{8, 3, 1, 1}, {16, 3, 2, 1}, {channels, 3, 2, 1}};
  return c;
}

std::size_t TinyCnnConfig::extent_after(std::size_t layer) const {
  std::size_t s = input_size;
  for (std::size_t i = 0; i <= layer && i < convs.size(); ++i) {
    const auto& c = convs[i];
    if (c.stride == 0 || s + 2 * c.padding < c.kernel) return 0;
    s = (s + 2 * c.padding - c.kernel) / c.stride + 1;
  }
  return s;
}

void TinyCnnConfig::validate() const {
  if (convs.empty()) throw std::invalid_argument("backbone needs at least one conv layer");
  if (input_size == 0 || in_channels == 0) throw std::invalid_argument("input size and channels must be positive");
  if (classes == 0) throw std::invalid_argument("classes must be positive");
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const auto& c = convs[i];
    if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
      throw std::invalid_argument("conv " + std::to_string(i) + ": channels, kernel and stride must be positive");
  }
  const std::size_t w = feature_extent();
  if (w < 4)
    throw std::invalid_argument("feature map collapses to " + std::to_string(w) + "x" + std::to_string(w) +
                                " (needs at least 4x4)");
  if (!(bn_eps > 0) || !(bn_momentum > 0 && bn_momentum <= 1))
    throw std::invalid_argument("bn_eps must be > 0 and bn_momentum in (0, 1]");
}

void to_json(nlohmann::json& j, const TinyCnnConfig& c) {
  nlohmann::json convs = nlohmann::json::array();
  for (const auto& s : c.convs)
    convs.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}, {"padding", s.padding}});
  j = nlohmann::json{{"input_size", c.input_size}, {"in_channels", c.in_channels}, {"convs", convs},
                     {"classes", c.classes},       {"batch_norm", c.batch_norm},   {"bn_eps", c.bn_eps},
                     {"bn_momentum", c.bn_momentum}};
}

void from_json(const nlohmann::json& j, TinyCnnConfig& c) {
  TinyCnnConfig out;
  out.input_size = j.value("input_size", out.input_size);
  out.in_channels = j.value("in_channels", out.in_channels);
  out.classes = j.value("classes", out.classes);
  out.batch_norm = j.value("batch_norm", out.batch_norm);
  out.bn_eps = j.value("bn_eps", out.bn_eps);
  out.bn_momentum = j.value("bn_momentum", out.bn_momentum);
  for (const auto& s : j.at("convs")) {
    ConvSpec cs;
    cs.out_channels = s.at("out_channels").get<std::size_t>();
    cs.kernel = s.value("kernel", cs.kernel);
    cs.stride = s.value("stride", cs.stride);
    cs.padding = s.value("padding", cs.padding);
    out.convs.push_back(cs);
  }
  out.validate();
  c = out;
}

namespace {

Tensor uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

std::string layer(const char* kind, std::size_t i, const char* what) {
  return std::string(kind) + std::to_string(i) + "." + what;
}

}  // namespace

TinyCnn TinyCnn::build(const TinyCnnConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TinyCnn m;
  m.cfg_ = cfg;
  Rng rng(seed);
  std::size_t in = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
    const auto& c = cfg.convs[i];
    const std::size_t fan_in = in * c.kernel * c.kernel;
    m.params_.add(layer("conv", i, "weight"),
                  uniform({c.out_channels, in, c.kernel, c.kernel}, std::sqrt(6.0 / double(fan_in)), rng));
    if (cfg.batch_norm) {
      m.params_.add(layer("bn", i, "gamma"), Tensor::full({c.out_channels}, 1.0));
      m.params_.add(layer("bn", i, "beta"), Tensor(Shape{c.out_channels}));
      m.buffers_.add(layer("bn", i, "running_mean"), Tensor(Shape{c.out_channels}));
      m.buffers_.add(layer("bn", i, "running_var"), Tensor::full({c.out_channels}, 1.0));
    } else {
      m.params_.add(layer("conv", i, "bias"), Tensor(Shape{c.out_channels}));
    }
    in = c.out_channels;
  }
  const std::size_t w = cfg.feature_extent();
  const std::size_t flat = in * w * w;
  m.params_.add("head.weight", uniform({cfg.classes, flat}, 1.0 / std::sqrt(double(flat)), rng));
  m.params_.add("head.bias", Tensor(Shape{cfg.classes}));
  return m;
}

ForwardResult TinyCnn::forward(Var input, std::span<const Var> params, bool training) const {
  if (params.size() != params_.size())
    throw std::invalid_argument("forward expects " + std::to_string(params_.size()) + " bound parameters");
  const Shape& s = input.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.input_size || s[3] != cfg_.input_size)
    throw ShapeError("backbone input must be (B," + std::to_string(cfg_.in_channels) + "," +
                     std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "), got " +
                     shape_str(s));
  auto p = [&](const std::string& name) { return params[params_.index_of(name)]; };
  ForwardResult out;
  Var x = input;
  ad::Tape& tape = input.tape();
  for (std::size_t i = 0; i < cfg_.convs.size(); ++i) {
    const auto& c = cfg_.convs[i];
    x = ad::conv2d(x, p(layer("conv", i, "weight")), c.stride, c.padding);
    if (!cfg_.batch_norm) {
      x = ad::add_channel_bias(x, p(layer("conv", i, "bias")));
    } else if (training) {
      ad::BatchStats st;
      x = ad::batch_norm(x, p(layer("bn", i, "gamma")), p(layer("bn", i, "beta")), cfg_.bn_eps, &st);
      out.stats.push_back(std::move(st));
    } else {
      const Tensor& gamma = p(layer("bn", i, "gamma")).value();
      const Tensor& beta = p(layer("bn", i, "beta")).value();
      const Tensor& rm = buffers_.get(layer("bn", i, "running_mean"));
      const Tensor& rv = buffers_.get(layer("bn", i, "running_var"));
      Tensor scale(Shape{c.out_channels}), shift(Shape{c.out_channels});
      for (std::size_t k = 0; k < c.out_channels; ++k) {
        scale[k] = gamma[k] / std::sqrt(rv[k] + cfg_.bn_eps);
        shift[k] = beta[k] - rm[k] * scale[k];
      }
      x = ad::channel_affine(x, tape.constant(std::move(scale)), tape.constant(std::move(shift)));
    }
    x = ad::relu(x);
  }
  out.features = x;
  out.logits = head(x, params);
  return out;
}

Var TinyCnn::head(Var features, std::span<const Var> params) const {
  const Shape& fs = features.shape();
  Var flat = ad::reshape(features, {fs[0], fs[1] * fs[2] * fs[3]});
  return ad::linear(flat, params[params_.index_of("head.weight")], params[params_.index_of("head.bias")]);
}

void TinyCnn::update_running_stats(const std::vector<ad::BatchStats>& stats, std::size_t batch) {
  if (!cfg_.batch_norm) return;
  if (stats.size() != cfg_.convs.size()) throw std::invalid_argument("one BatchStats per conv layer expected");
  const double mom = cfg_.bn_momentum;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const std::size_t e = cfg_.extent_after(i);
    const double m = static_cast<double>(batch * e * e);
    const double unbias = m > 1 ? m / (m - 1) : 1.0;
    Tensor& rm = buffers_.get(layer("bn", i, "running_mean"));
    Tensor& rv = buffers_.get(layer("bn", i, "running_var"));
    for (std::size_t k = 0; k < rm.size(); ++k) {
      rm[k] = (1 - mom) * rm[k] + mom * stats[i].mean[k];
      rv[k] = (1 - mom) * rv[k] + mom * stats[i].var[k] * unbias;
    }
  }
}

void save_checkpoint(const std::filesystem::path& dir, const std::vector<const ParameterSet*>& sets) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "tensors.mct", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + (dir / "tensors.mct").string());
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const ParameterSet* set : sets)
    for (const auto& p : set->items()) {
      write_mct(bin, p.value);
      manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
      offset += mct_byte_size(p.value.shape());
    }
  bin.close();
  if (!bin) throw std::runtime_error("write failed for " + (dir / "tensors.mct").string());
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

ParameterSet load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.json");
  if (!man) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  const nlohmann::json manifest = nlohmann::json::parse(man);
  const auto bin_path = dir / "tensors.mct";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + bin_path.string());
  ParameterSet out;
  for (const auto& e : manifest) {
    const auto offset = e.at("offset").get<std::size_t>();
    bin.seekg(static_cast<std::streamoff>(offset));
    Tensor t = read_mct(bin, bin_path.string());
    if (t.shape() != e.at("shape").get<Shape>())
      throw FormatError(bin_path.string() + ": tensor " + e.at("name").get<std::string>() +
                        " does not match its manifest shape");
    out.add(e.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

}  // namespace mcl
