#include "mcl/mc_loss.hpp"

#include <atomic>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mcl {

using ad::Segment;
using ad::Var;

ChannelAssignment ChannelAssignment::solve(std::size_t channels, std::size_t classes) {
  if (classes == 0) throw std::invalid_argument("channel assignment needs at least one class");
  if (channels < classes)
    throw std::invalid_argument("cannot assign " + std::to_string(channels) + " channels to " +
                                std::to_string(classes) + " classes: a class would get zero channels");
  const std::size_t low = channels / classes;
  const std::size_t n_low = classes * (low + 1) - channels;  // classes keeping ⌊N/c⌋
  std::vector<Segment> groups;
  groups.reserve(classes);
  std::size_t at = 0;
  for (std::size_t i = 0; i < classes; ++i) {
    const std::size_t len = i < n_low ? low : low + 1;
    groups.push_back(Segment{at, at + len});
    at += len;
  }
  return ChannelAssignment(channels, std::move(groups));
}

ChannelAssignment ChannelAssignment::uniform(std::size_t classes, std::size_t xi) {
  if (classes == 0) throw std::invalid_argument("channel assignment needs at least one class");
  if (xi == 0) throw std::invalid_argument("xi must be at least 1");
  std::vector<Segment> groups;
  for (std::size_t i = 0; i < classes; ++i) groups.push_back(Segment{i * xi, (i + 1) * xi});
  return ChannelAssignment(classes * xi, std::move(groups));
}

std::string ChannelAssignment::summary() const {
  std::map<std::size_t, std::size_t> counts;  // xi -> classes
  for (const auto& g : groups_) ++counts[g.size()];
  std::ostringstream os;
  bool first = true;
  for (const auto& [xi, n] : counts) {
    if (!first) os << ", ";
    os << n << " classes ×" << xi;
    first = false;
  }
  return os.str();
}

ChannelGroups ChannelGroups::from(const ChannelAssignment& a) {
  ChannelGroups g;
  g.channels = a.channels();
  for (const auto& seg : a.groups()) {
    std::vector<std::size_t> m;
    for (std::size_t k = seg.begin; k < seg.end; ++k) m.push_back(k);
    g.members.push_back(std::move(m));
  }
  return g;
}

void ChannelGroups::validate() const {
  if (members.empty()) throw std::invalid_argument("channel groups: no classes");
  for (const auto& m : members) {
    if (m.empty()) throw std::invalid_argument("channel groups: empty group");
    for (auto k : m)
      if (k >= channels) throw std::invalid_argument("channel groups: channel " + std::to_string(k) + " out of range");
  }
}

std::size_t CwaMask::ones() const {
  std::size_t n = 0;
  for (auto b : bits) n += b;
  return n;
}

MaskRng::MaskRng(std::uint64_t seed) : seed_(seed), state_(seed) {}

// splitmix64
std::uint64_t MaskRng::next() {
  ++draws_;
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::size_t MaskRng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index(0)");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next();
    if (r >= threshold) return static_cast<std::size_t>(r % bound);
  }
}

CwaMask sample_cwa_mask(std::size_t xi, MaskRng& rng) {
  if (xi == 0) throw std::invalid_argument("sample_cwa_mask: xi must be at least 1");
  CwaMask m{std::vector<std::uint8_t>(xi, 1), rng.seed()};
  std::vector<std::size_t> order(xi);
  for (std::size_t i = 0; i < xi; ++i) order[i] = i;
  const std::size_t zeros = xi / 2;
  // Partial Fisher-Yates: the first `zeros` slots are a uniform random subset.
  for (std::size_t i = 0; i < zeros; ++i) {
    const std::size_t j = i + rng.uniform_index(xi - i);
    std::swap(order[i], order[j]);
    m.bits[order[i]] = 0;
  }
  return m;
}

CwaMask unit_mask(std::size_t xi) { return CwaMask{std::vector<std::uint8_t>(xi, 1), 0}; }

MaskSet sample_masks(std::size_t batch, const ChannelGroups& groups, MaskRng& rng) {
  MaskSet set(batch);
  for (auto& per_sample : set)
    for (const auto& g : groups.members) per_sample.push_back(sample_cwa_mask(g.size(), rng));
  return set;
}

MaskSet unit_masks(std::size_t batch, const ChannelGroups& groups) {
  MaskSet set(batch);
  for (auto& per_sample : set)
    for (const auto& g : groups.members) per_sample.push_back(unit_mask(g.size()));
  return set;
}

void McLossConfig::validate() const {
  if (!(mu >= 0.0)) throw std::invalid_argument("mu must be >= 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
}

namespace {
const char* pooling_name(Pooling p) { return p == Pooling::Ccmp ? "ccmp" : "ccap"; }
const char* diversity_name(Diversity d) {
  switch (d) {
    case Diversity::Full: return "full";
    case Diversity::V2: return "v2";
    case Diversity::Off: return "off";
  }
  return "full";
}
}  // namespace

void to_json(nlohmann::json& j, const McLossConfig& c) {
  j = nlohmann::json{{"mu", c.mu},
                     {"lambda", c.lambda},
                     {"pooling", pooling_name(c.pooling)},
                     {"diversity", diversity_name(c.diversity)},
                     {"cwa", c.cwa}};
  if (c.xi == 0)
    j["xi"] = "table2";
  else
    j["xi"] = c.xi;
}

void from_json(const nlohmann::json& j, McLossConfig& c) {
  McLossConfig out;
  out.mu = j.value("mu", out.mu);
  out.lambda = j.value("lambda", out.lambda);
  if (j.contains("xi")) {
    const auto& xi = j.at("xi");
    if (xi.is_string()) {
      if (xi.get<std::string>() != "table2") throw std::invalid_argument("xi must be an integer or \"table2\"");
      out.xi = 0;
    } else {
      const auto v = xi.get<long long>();
      if (v < 1) throw std::invalid_argument("xi must be >= 1");
      out.xi = static_cast<std::size_t>(v);
    }
  }
  const std::string pooling = j.value("pooling", std::string("ccmp"));
  if (pooling == "ccmp")
    out.pooling = Pooling::Ccmp;
  else if (pooling == "ccap")
    out.pooling = Pooling::Ccap;
  else
    throw std::invalid_argument("unknown pooling '" + pooling + "'");
  const std::string diversity = j.value("diversity", std::string("full"));
  if (diversity == "full")
    out.diversity = Diversity::Full;
  else if (diversity == "v2")
    out.diversity = Diversity::V2;
  else if (diversity == "off")
    out.diversity = Diversity::Off;
  else
    throw std::invalid_argument("unknown diversity '" + diversity + "'");
  out.cwa = j.value("cwa", out.cwa);
  out.validate();
  c = out;
}

ChannelAssignment make_assignment(const McLossConfig& cfg, std::size_t classes, std::size_t channels) {
  if (!cfg.uniform_xi()) return ChannelAssignment::solve(channels, classes);
  if (channels != classes * cfg.xi)
    throw std::invalid_argument("backbone emits " + std::to_string(channels) + " channels but " +
                                std::to_string(classes) + " classes x xi=" + std::to_string(cfg.xi) + " need " +
                                std::to_string(classes * cfg.xi));
  return ChannelAssignment::uniform(classes, cfg.xi);
}

Var ccmp(Var group) { return ad::reduce_max(group, 0); }
Var ccap(Var group) { return ad::reduce_mean(group, 0); }
Var gap(Var v) { return ad::mean(v); }

Var g_score(Var group, const CwaMask& mask, Pooling pooling) {
  if (group.shape().size() != 2) throw ShapeError("g_score: group must be (xi, WH), got " + shape_str(group.shape()));
  const std::size_t xi = group.shape()[0], k = group.shape()[1];
  if (mask.bits.size() != xi) throw ShapeError("g_score: mask length does not match group size");
  Tensor m(group.shape());
  for (std::size_t j = 0; j < xi; ++j)
    for (std::size_t i = 0; i < k; ++i) m[j * k + i] = mask.bits[j];
  Var masked = ad::mul(group, group.tape().constant(std::move(m)));
  return gap(pooling == Pooling::Ccmp ? ccmp(masked) : ccap(masked));
}

Var spatial_softmax(Var channel) { return ad::softmax(channel, channel.shape().size() - 1); }

Var diversity_score_h(Var group) {
  if (group.shape().size() != 2) throw ShapeError("diversity_score_h: group must be (xi, WH)");
  return ad::sum(ccmp(spatial_softmax(group)));
}

namespace {

// (B,N,WH) view of the feature tensor.
Var as_bnk(Var f, const ChannelGroups& groups) {
  const Shape& s = f.shape();
  Var out = f;
  if (s.size() == 4)
    out = ad::reshape(f, {s[0], s[1], s[2] * s[3]});
  else if (s.size() != 3)
    throw ShapeError("features must be (B,N,W,H) or (B,N,WH), got " + shape_str(s));
  if (out.shape()[1] != groups.channels)
    throw ShapeError("features have " + std::to_string(out.shape()[1]) + " channels, groups expect " +
                     std::to_string(groups.channels));
  return out;
}

struct FlatGroups {
  std::vector<std::size_t> index;
  std::vector<Segment> segments;
};

FlatGroups flatten(const ChannelGroups& groups) {
  groups.validate();
  FlatGroups f;
  for (const auto& m : groups.members) {
    const std::size_t begin = f.index.size();
    f.index.insert(f.index.end(), m.begin(), m.end());
    f.segments.push_back(Segment{begin, f.index.size()});
  }
  return f;
}

void check_labels(std::span<const std::size_t> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) throw ShapeError("label count does not match batch size");
  for (auto y : labels)
    if (y >= classes)
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
}

std::atomic<std::uint64_t> g_mc_evaluations{0};

}  // namespace

Var discriminality_loss(Var features, std::span<const std::size_t> labels, const ChannelGroups& groups,
                        const MaskSet& masks, const McLossConfig& cfg) {
  Var f = as_bnk(features, groups);
  const std::size_t B = f.shape()[0], K = f.shape()[2];
  check_labels(labels, B, groups.classes());
  const FlatGroups flat = flatten(groups);
  Var gathered = ad::index_select(f, 1, flat.index);
  if (cfg.cwa) {
    if (masks.size() != B) throw ShapeError("discriminality_loss: need one mask set per sample");
    const std::size_t S = flat.index.size();
    Tensor m(Shape{B, S, K});
    for (std::size_t b = 0; b < B; ++b) {
      if (masks[b].size() != groups.classes()) throw ShapeError("discriminality_loss: need one mask per group");
      for (std::size_t g = 0; g < groups.classes(); ++g) {
        const auto& bits = masks[b][g].bits;
        if (bits.size() != flat.segments[g].size()) throw ShapeError("discriminality_loss: mask length mismatch");
        for (std::size_t j = 0; j < bits.size(); ++j) {
          double* row = m.data().data() + (b * S + flat.segments[g].begin + j) * K;
          std::fill(row, row + K, static_cast<double>(bits[j]));
        }
      }
    }
    gathered = ad::mul(gathered, f.tape().constant(std::move(m)));
  }
  Var pooled = cfg.pooling == Pooling::Ccmp ? ad::segment_max(gathered, 1, flat.segments)
                                            : ad::segment_mean(gathered, 1, flat.segments);
  Var scores = ad::reduce_mean(pooled, 2);  // (B, c)
  return ad::cross_entropy(scores, labels);
}

Var diversity_loss(Var features, const ChannelGroups& groups, const McLossConfig& cfg,
                   std::span<const std::size_t> labels) {
  if (cfg.diversity == Diversity::Off) return features.tape().constant(Tensor::scalar(0.0));
  Var f = as_bnk(features, groups);
  const std::size_t B = f.shape()[0];
  if (cfg.diversity == Diversity::V2) {
    if (labels.empty()) throw std::invalid_argument("diversity V2 needs labels");
    check_labels(labels, B, groups.classes());
  }
  const FlatGroups flat = flatten(groups);
  Var sm = ad::softmax(f, 2);
  Var peaks = ad::segment_max(ad::index_select(sm, 1, flat.index), 1, flat.segments);  // (B, c, WH)
  Var h = ad::reduce_sum(peaks, 2);                                                      // (B, c)
  if (cfg.diversity == Diversity::V2) return ad::mean(ad::pick(h, labels));
  return ad::mean(ad::reduce_mean(h, 1));
}

Var combine_mc(Var l_dis, Var l_div, double lambda) { return ad::sub(l_dis, ad::scale(l_div, lambda)); }

Var combine_total(Var l_ce, Var l_mc, double mu) { return ad::add(l_ce, ad::scale(l_mc, mu)); }

McLossTerms mc_loss(Var features, std::span<const std::size_t> labels, const ChannelGroups& groups,
                    const MaskSet& masks, const McLossConfig& cfg) {
  if (!cfg.training_mode) throw std::logic_error("mc_loss evaluated outside training mode");
  g_mc_evaluations.fetch_add(1, std::memory_order_relaxed);
  McLossTerms t;
  t.l_dis = discriminality_loss(features, labels, groups, masks, cfg);
  t.l_div = diversity_loss(features, groups, cfg, labels);
  t.l_mc = combine_mc(t.l_dis, t.l_div, cfg.lambda);
  return t;
}

LossBreakdown total_loss(Var logits, Var features, std::span<const std::size_t> labels, const ChannelGroups& groups,
                         const MaskSet& masks, const McLossConfig& cfg) {
  LossBreakdown out;
  out.l_ce = ad::cross_entropy(logits, labels);
  out.ce = out.l_ce.value().item();
  if (!cfg.training_mode) {
    out.total = out.l_ce;
    out.value = out.ce;
    return out;
  }
  const McLossTerms t = mc_loss(features, labels, groups, masks, cfg);
  out.total = combine_total(out.l_ce, t.l_mc, cfg.mu);
  out.dis = t.l_dis.value().item();
  out.div = t.l_div.value().item();
  out.mc = t.l_mc.value().item();
  out.value = out.total.value().item();
  out.mc_evaluated = true;
  return out;
}

std::uint64_t mc_branch_evaluations() { return g_mc_evaluations.load(std::memory_order_relaxed); }

}  // namespace mcl
