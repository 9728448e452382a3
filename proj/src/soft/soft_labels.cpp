#include "mcl/soft_labels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "mcl/rng.hpp"

namespace mcl {

using ad::Segment;
using ad::Var;

void SoftLabelConfig::validate() const {
  if (reduction == 0) throw std::invalid_argument("soft_labels.reduction must be >= 1");
}

void to_json(nlohmann::json& j, const SoftLabelConfig& c) {
  j = nlohmann::json{{"enabled", c.enabled}, {"reduction", c.reduction}, {"negate_intra", c.negate_intra}};
}

void from_json(const nlohmann::json& j, SoftLabelConfig& c) {
  SoftLabelConfig out;
  out.enabled = j.value("enabled", out.enabled);
  out.reduction = j.value("reduction", out.reduction);
  out.negate_intra = j.value("negate_intra", out.negate_intra);
  out.validate();
  c = out;
}

namespace {

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

SoftLabelHead SoftLabelHead::init(std::size_t channels, std::size_t reduction, std::uint64_t seed) {
  if (channels == 0 || reduction == 0) throw std::invalid_argument("SE head needs channels and reduction >= 1");
  const std::size_t hidden = std::max<std::size_t>(1, channels / reduction);
  Rng rng(seed);
  ParameterSet p;
  p.add("se.a1.weight", uniform_init({hidden, channels}, 1.0 / std::sqrt(double(channels)), rng));
  p.add("se.a1.bias", Tensor(Shape{hidden}));
  p.add("se.a2.weight", uniform_init({channels, hidden}, 1.0 / std::sqrt(double(hidden)), rng));
  p.add("se.a2.bias", Tensor(Shape{channels}));
  return SoftLabelHead(channels, hidden, std::move(p));
}

SoftLabelHead SoftLabelHead::from_params(ParameterSet params) {
  const Tensor& a1 = params.get("se.a1.weight");
  if (a1.rank() != 2) throw ShapeError("se.a1.weight must be rank 2");
  const std::size_t hidden = a1.dim(0), channels = a1.dim(1);
  if (params.get("se.a1.bias").shape() != Shape{hidden} || params.get("se.a2.weight").shape() != Shape{channels, hidden} ||
      params.get("se.a2.bias").shape() != Shape{channels})
    throw ShapeError("inconsistent SE head parameter shapes");
  return SoftLabelHead(channels, hidden, std::move(params));
}

SeVars SeVars::bind(ad::Tape& tape, const SoftLabelHead& head, bool trainable) {
  const auto vars = trainable ? head.params().bind(tape) : head.params().bind_constant(tape);
  const auto& p = head.params();
  return SeVars{vars[p.index_of("se.a1.weight")], vars[p.index_of("se.a1.bias")], vars[p.index_of("se.a2.weight")],
                vars[p.index_of("se.a2.bias")]};
}

Var se_forward(Var features, const SeVars& head) {
  const Shape& s = features.shape();
  if (s.size() < 2) throw ShapeError("se_forward expects features (B,N,...), got " + shape_str(s));
  const std::size_t n = head.a1_w.shape().at(1);
  if (s[1] != n)
    throw ShapeError("SE head expects " + std::to_string(n) + " channels, features have " + std::to_string(s[1]));
  std::size_t spatial = 1;
  for (std::size_t d = 2; d < s.size(); ++d) spatial *= s[d];
  Var pooled = ad::reduce_mean(ad::reshape(features, {s[0], n, spatial}), 2);  // (B,N)
  Var hidden = ad::relu(ad::linear(pooled, head.a1_w, head.a1_b));
  return ad::sigmoid(ad::linear(hidden, head.a2_w, head.a2_b));
}

BatchLabelMatrix BatchLabelMatrix::from_labels(std::span<const std::size_t> labels) {
  if (labels.empty()) throw std::invalid_argument("label losses need a non-empty batch");
  BatchLabelMatrix m;
  m.order.resize(labels.size());
  std::iota(m.order.begin(), m.order.end(), 0);
  std::stable_sort(m.order.begin(), m.order.end(), [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
  for (std::size_t i = 0; i < m.order.size(); ++i) {
    const std::size_t cls = labels[m.order[i]];
    if (m.classes.empty() || m.classes.back() != cls) {
      m.classes.push_back(cls);
      m.segments.push_back(Segment{i, i + 1});
    } else {
      m.segments.back().end = i + 1;
    }
  }
  return m;
}

namespace {

// (C, N): column maxima of each class block W_i.
Var class_maxima(Var weights, const BatchLabelMatrix& m) {
  if (m.classes.empty()) throw std::invalid_argument("label losses need a non-empty batch");
  if (weights.shape().size() != 2 || weights.shape()[0] != m.order.size())
    throw ShapeError("weights must be (B,N) matching the label batch, got " + shape_str(weights.shape()));
  return ad::segment_max(ad::index_select(weights, 0, m.order), 0, m.segments);
}

}  // namespace

Var l_intra(Var weights, const BatchLabelMatrix& m) {
  return ad::scale(ad::sum(class_maxima(weights, m)), 1.0 / static_cast<double>(m.represented()));
}

Var l_inter(Var weights, const BatchLabelMatrix& m) {
  return ad::scale(ad::sum(ad::reduce_max(class_maxima(weights, m), 0)), -1.0);
}

Var combine_soft(Var l_ce, Var l_mc, Var intra, Var inter, double mu) {
  return ad::add(ad::add(combine_total(l_ce, l_mc, mu), intra), inter);
}

SoftLossBreakdown total_loss_soft(Var logits, Var features, Var weights, std::span<const std::size_t> labels,
                                  const ChannelGroups& soft_groups, const MaskSet& masks, const McLossConfig& mc,
                                  const SoftLabelConfig& soft) {
  SoftLossBreakdown out;
  Var ce = ad::cross_entropy(logits, labels);
  const McLossTerms terms = mc_loss(features, labels, soft_groups, masks, mc);
  const BatchLabelMatrix m = BatchLabelMatrix::from_labels(labels);
  Var intra = l_intra(weights, m);
  if (soft.negate_intra) intra = ad::scale(intra, -1.0);
  Var inter = l_inter(weights, m);
  out.total = combine_soft(ce, terms.l_mc, intra, inter, mc.mu);
  out.ce = ce.value().item();
  out.dis = terms.l_dis.value().item();
  out.div = terms.l_div.value().item();
  out.mc = terms.l_mc.value().item();
  out.intra = intra.value().item();
  out.inter = inter.value().item();
  out.value = out.total.value().item();
  return out;
}

ClassMeanWeights class_mean_weights(const Tensor& weights, std::span<const std::size_t> labels, std::size_t classes) {
  if (weights.rank() != 2 || weights.dim(0) != labels.size())
    throw ShapeError("weights must be (S,N) with one label per row");
  const std::size_t n = weights.dim(1);
  ClassMeanWeights out{Tensor(Shape{classes, n}), std::vector<std::size_t>(classes, 0)};
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (labels[s] >= classes) throw std::invalid_argument("label " + std::to_string(labels[s]) + " out of range");
    ++out.counts[labels[s]];
    for (std::size_t k = 0; k < n; ++k) out.mean[labels[s] * n + k] += weights[s * n + k];
  }
  for (std::size_t c = 0; c < classes; ++c)
    if (out.counts[c] > 0)
      for (std::size_t k = 0; k < n; ++k) out.mean[c * n + k] /= static_cast<double>(out.counts[c]);
  return out;
}

namespace {

std::vector<std::size_t> ranked_channels(const Tensor& mean, std::size_t cls) {
  const std::size_t n = mean.dim(1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return mean[cls * n + a] > mean[cls * n + b]; });
  return idx;
}

}  // namespace

ChannelGroups derive_soft_groups(const Tensor& class_mean, const ChannelAssignment& sizes) {
  if (class_mean.rank() != 2 || class_mean.dim(0) != sizes.classes() || class_mean.dim(1) != sizes.channels())
    throw ShapeError("class mean weights " + shape_str(class_mean.shape()) + " do not match the assignment");
  ChannelGroups g;
  g.channels = sizes.channels();
  for (std::size_t c = 0; c < sizes.classes(); ++c) {
    auto ranked = ranked_channels(class_mean, c);
    ranked.resize(sizes.xi(c));
    g.members.push_back(std::move(ranked));
  }
  return g;
}

double TopChannelReport::top1_separation() const {
  std::size_t pairs = 0, differ = 0;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      ++pairs;
      differ += rows[a].channels.front() != rows[b].channels.front();
    }
  return pairs == 0 ? 0.0 : static_cast<double>(differ) / static_cast<double>(pairs);
}

void TopChannelReport::write_csv(std::ostream& out) const {
  out << "class_id,rank,channel_index,mean_weight\n";
  char buf[64];
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.channels.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", r.weights[i]);
      out << r.class_id << ',' << i << ',' << r.channels[i] << ',' << buf << '\n';
    }
}

TopChannelReport top_channels_report(const ClassMeanWeights& means, std::size_t k) {
  const std::size_t n = means.mean.dim(1);
  if (k == 0 || k > n) throw std::invalid_argument("k must lie in [1, " + std::to_string(n) + "]");
  TopChannelReport rep;
  for (std::size_t c = 0; c < means.counts.size(); ++c) {
    if (means.counts[c] == 0) {
      rep.warnings.push_back("class " + std::to_string(c) + " has no samples; omitted");
      continue;
    }
    auto ranked = ranked_channels(means.mean, c);
    ranked.resize(k);
    ClassRanking row{c, ranked, {}};
    for (auto ch : ranked) row.weights.push_back(means.mean[c * n + ch]);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace mcl
