#include "mcl/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "mcl/rng.hpp"

namespace mcl {

using ad::Tape;
using ad::Var;

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::Ce: return "ce";
    case Objective::Mc: return "mc";
    case Objective::Soft: return "soft";
  }
  return "mc";
}

void TrainConfig::validate() const {
  if (!(lr0 > 0) || !std::isfinite(lr0)) throw std::invalid_argument("lr0 must be > 0");
  if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i] >= epochs) throw std::invalid_argument("schedule epoch " + std::to_string(schedule[i]) + " >= epochs");
    if (i > 0 && schedule[i] <= schedule[i - 1]) throw std::invalid_argument("schedule must be strictly increasing");
  }
  if (channels == 0 && !mc.uniform_xi())
    throw std::invalid_argument("xi = \"table2\" needs an explicit channels count");
  mc.validate();
  soft.validate();
  if (objective == Objective::Soft && mc.diversity == Diversity::V2)
    throw std::invalid_argument("soft-label runs support diversity full or off");
}

std::size_t TrainConfig::feature_channels(std::size_t classes) const {
  return channels != 0 ? channels : classes * mc.xi;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json data = nlohmann::json::object();
  if (!c.data.dir.empty()) data["dir"] = c.data.dir;
  if (c.data.synthetic) {
    data["synthetic"] = *c.data.synthetic;
    data["seed"] = c.data.seed;
  }
  SoftLabelConfig soft = c.soft;
  soft.enabled = soft.enabled || c.objective == Objective::Soft;
  j = nlohmann::json{{"lr0", c.lr0},
                     {"schedule", c.schedule},
                     {"epochs", c.epochs},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"objective", objective_name(c.objective)},
                     {"channels", c.channels},
                     {"mc", c.mc},
                     {"soft", soft},
                     {"data", data}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig o;
  o.lr0 = j.value("lr0", o.lr0);
  o.schedule = j.value("schedule", o.schedule);
  o.epochs = j.value("epochs", o.epochs);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.seed = j.value("seed", o.seed);
  const std::string obj = j.value("objective", std::string("mc"));
  if (obj == "ce")
    o.objective = Objective::Ce;
  else if (obj == "mc")
    o.objective = Objective::Mc;
  else if (obj == "soft")
    o.objective = Objective::Soft;
  else
    throw std::invalid_argument("unknown objective '" + obj + "'");
  o.channels = j.value("channels", o.channels);
  if (j.contains("mc")) o.mc = j.at("mc").get<McLossConfig>();
  if (j.contains("soft")) o.soft = j.at("soft").get<SoftLabelConfig>();
  if (o.objective == Objective::Soft) o.soft.enabled = true;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    o.data.dir = d.value("dir", std::string());
    if (d.contains("synthetic")) o.data.synthetic = d.at("synthetic").get<SyntheticPartsSpec>();
    o.data.seed = d.value("seed", o.data.seed);
  }
  o.validate();
  c = o;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return j.get<TrainConfig>();
}

void apply_env_overrides(TrainConfig& cfg) {
  if (const char* s = std::getenv("MC_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw std::invalid_argument(std::string("MC_SEED is not an unsigned integer: ") + s);
    cfg.seed = v;
  }
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string text = nlohmann::json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr0;
  for (std::size_t m : cfg.schedule)
    if (m <= epoch) lr *= 0.1;
  return lr;
}

void sgd_step(ParameterSet& params, const std::vector<Tensor>& grads, double lr, double weight_decay) {
  if (grads.size() != params.size()) throw std::invalid_argument("one gradient per parameter expected");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& p = params.items()[i];
    if (grads[i].shape() != p.value.shape())
      throw ShapeError("gradient shape " + shape_str(grads[i].shape()) + " does not match parameter " + p.name);
    for (double g : grads[i].data())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + p.name);
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto v = params.items()[i].value.data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr * (g[k] + weight_decay * v[k]);
  }
}

void RunMetrics::write_csv(std::ostream& out) const {
  out << "epoch,split,acc,l_ce,l_dis,l_div,l_total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.split.c_str(), r.acc, r.l_ce,
                  r.l_dis, r.l_div, r.l_total);
    out << buf;
  }
}

double RunMetrics::final_accuracy(const std::string& split) const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->split == split) return it->acc;
  throw std::logic_error("no metrics for split " + split);
}

namespace {

enum Stream : std::uint64_t { kInit = 0, kShuffle = 1, kMasks = 2, kHead = 3 };

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t k = 1; k < c; ++k)
    if (logits[row * c + k] > logits[row * c + best]) best = k;
  return best;
}

std::vector<Tensor> collect_grads(const Tape& tape, const std::vector<Var>& vars) {
  std::vector<Tensor> g;
  g.reserve(vars.size());
  for (const Var& v : vars) g.push_back(tape.grad(v));
  return g;
}

}  // namespace

EvalResult evaluate(const TinyCnn& model, const Dataset& ds, std::size_t batch_size) {
  EvalResult out;
  out.logits = Tensor(Shape{ds.size(), model.config().classes});
  std::size_t correct = 0;
  double ce = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tape tape;
    const auto params = model.params().bind_constant(tape);
    const ForwardResult fr = model.forward(tape.constant(ds.gather(rows)), params, false);
    const std::span<const std::size_t> labels(ds.labels.data() + start, end - start);
    ce += ad::cross_entropy(fr.logits, labels).value().item() * static_cast<double>(end - start);
    const Tensor& z = fr.logits.value();
    std::copy(z.data().begin(), z.data().end(), out.logits.data().begin() + start * z.dim(1));
    for (std::size_t r = 0; r < rows.size(); ++r) correct += argmax_row(z, r) == labels[r];
  }
  out.acc = static_cast<double>(correct) / static_cast<double>(ds.size());
  out.l_ce = ce / static_cast<double>(ds.size());
  return out;
}

Tensor soft_label_weights(const TinyCnn& model, const SoftLabelHead& head, const Dataset& ds, std::size_t batch_size) {
  Tensor out(Shape{ds.size(), head.channels()});
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tape tape;
    const auto params = model.params().bind_constant(tape);
    const ForwardResult fr = model.forward(tape.constant(ds.gather(rows)), params, false);
    const Tensor w = se_forward(fr.features, SeVars::bind(tape, head, false)).value();
    std::copy(w.data().begin(), w.data().end(), out.data().begin() + start * head.channels());
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  train_set.validate();
  test_set.validate();
  if (train_set.classes != test_set.classes) throw std::invalid_argument("train and test class counts differ");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t classes = train_set.classes;
  const std::size_t n_channels = cfg.feature_channels(classes);
  const ChannelAssignment assignment = make_assignment(cfg.mc, classes, n_channels);
  const ChannelGroups fixed_groups = ChannelGroups::from(assignment);

  TinyCnnConfig mcfg = TinyCnnConfig::desk(classes, n_channels, train_set.images.dim(2));
  TrainResult res{RunMetrics{}, TinyCnn::build(mcfg, derive_seed(cfg.seed, kInit)), TinyCnn{}, 0, -1.0, {}, {}, 0};
  res.metrics.seed = cfg.seed;
  TinyCnn& model = res.model;
  const bool soft = cfg.objective == Objective::Soft;
  if (soft) res.head = SoftLabelHead::init(n_channels, cfg.soft.reduction, derive_seed(cfg.seed, kHead));
  ChannelGroups groups = fixed_groups;

  Rng shuffle_rng(derive_seed(cfg.seed, kShuffle));
  MaskRng mask_rng(derive_seed(cfg.seed, kMasks));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    shuffle_rng.shuffle(order.begin(), order.end());
    EpochMetrics tr{epoch, "train"};
    std::size_t correct = 0;
    Tensor weight_sum = soft ? Tensor(Shape{classes, n_channels}) : Tensor();
    std::vector<std::size_t> weight_count(classes, 0);
    for (std::size_t start = 0, iter = 0; start < order.size(); start += cfg.batch_size, ++iter) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      std::vector<std::size_t> labels(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) labels[r] = train_set.labels[rows[r]];

      Tape tape;
      const auto params = model.params().bind(tape);
      const ForwardResult fr = model.forward(tape.constant(train_set.gather(rows)), params, true);
      Var total;
      double ce = 0, dis = 0, div = 0, value = 0;
      std::vector<Var> head_vars;
      if (cfg.objective == Objective::Ce) {
        total = ad::cross_entropy(fr.logits, labels);
        ce = value = total.value().item();
      } else {
        const MaskSet masks = cfg.mc.cwa ? sample_masks(rows.size(), groups, mask_rng) : unit_masks(rows.size(), groups);
        if (!soft) {
          const LossBreakdown lb = total_loss(fr.logits, fr.features, labels, groups, masks, cfg.mc);
          total = lb.total;
          ce = lb.ce, dis = lb.dis, div = lb.div, value = lb.value;
        } else {
          const SeVars se = SeVars::bind(tape, *res.head);
          head_vars = {se.a1_w, se.a1_b, se.a2_w, se.a2_b};
          const Var w = se_forward(fr.features, se);
          const SoftLossBreakdown sb =
              total_loss_soft(fr.logits, fr.features, w, labels, groups, masks, cfg.mc, cfg.soft);
          total = sb.total;
          ce = sb.ce, dis = sb.dis, div = sb.div, value = sb.value;
          const Tensor& wv = w.value();
          for (std::size_t r = 0; r < rows.size(); ++r) {
            ++weight_count[labels[r]];
            for (std::size_t k = 0; k < n_channels; ++k)
              weight_sum[labels[r] * n_channels + k] += wv[r * n_channels + k];
          }
        }
      }
      if (!std::isfinite(value))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                             std::to_string(iter));
      tape.backward(total);
      try {
        sgd_step(model.params(), collect_grads(tape, params), lr, cfg.weight_decay);
        if (soft) sgd_step(res.head->params(), collect_grads(tape, head_vars), lr, cfg.weight_decay);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", iteration " +
                             std::to_string(iter));
      }
      model.update_running_stats(fr.stats, rows.size());

      const double n = static_cast<double>(rows.size());
      tr.l_ce += ce * n, tr.l_dis += dis * n, tr.l_div += div * n, tr.l_total += value * n;
      const Tensor& z = fr.logits.value();
      for (std::size_t r = 0; r < rows.size(); ++r) correct += argmax_row(z, r) == labels[r];
    }
    const double n = static_cast<double>(train_set.size());
    tr.acc = static_cast<double>(correct) / n;
    tr.l_ce /= n, tr.l_dis /= n, tr.l_div /= n, tr.l_total /= n;

    if (soft) {
      ClassMeanWeights means{weight_sum, weight_count};
      for (std::size_t c = 0; c < classes; ++c)
        if (weight_count[c] > 0)
          for (std::size_t k = 0; k < n_channels; ++k)
            means.mean[c * n_channels + k] /= static_cast<double>(weight_count[c]);
      groups = derive_soft_groups(means.mean, assignment);
      res.soft_groups = groups;
    }

    const EvalResult ev = evaluate(model, test_set, 64);
    const EpochMetrics te{epoch, "test", ev.acc, ev.l_ce, 0.0, 0.0, ev.l_ce};
    res.metrics.rows.push_back(tr);
    res.metrics.rows.push_back(te);
    if (ev.acc > res.best_accuracy) {
      res.best_accuracy = ev.acc;
      res.best_epoch = epoch;
      res.best_model = model;
    }
    if (on_epoch) on_epoch(tr, te);
  }
  res.mask_draws = mask_rng.draws();
  res.metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

Tensor gradcam_map(const Tensor& activation, const Tensor& grad) {
  if (activation.shape() != grad.shape()) throw ShapeError("gradcam_map: activation and gradient shapes differ");
  const std::size_t area = activation.size();
  double alpha = 0.0;
  for (double v : grad.data()) alpha += v;
  alpha /= static_cast<double>(area);
  Tensor map(activation.shape());
  for (std::size_t k = 0; k < area; ++k) map[k] = std::max(0.0, alpha * activation[k]);
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double mn = *lo, mx = *hi;
  for (double& v : map.data()) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
  return map;
}

std::vector<Tensor> channel_heatmaps(const TinyCnn& model, const Tensor& image, std::span<const std::size_t> channels,
                                     std::size_t cls) {
  const std::size_t n = model.config().feature_channels();
  for (std::size_t channel : channels)
    if (channel >= n)
      throw std::invalid_argument("channel " + std::to_string(channel) + " out of range [0, " + std::to_string(n) + ")");
  if (cls >= model.config().classes) throw std::invalid_argument("class " + std::to_string(cls) + " out of range");
  if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("heatmap expects a single image (1,C,S,S)");
  Tensor act;
  {
    Tape tape;
    act = model.forward(tape.constant(image), model.params().bind_constant(tape), false).features.value();
  }
  // the class score depends on F only through the head
  Tape tape;
  const Var f = tape.leaf(act, true);
  const std::size_t pick_idx[] = {cls};
  tape.backward(ad::pick(model.head(f, model.params().bind_constant(tape)), pick_idx));
  const Tensor grad = tape.grad(f);
  const std::size_t w = act.dim(2), h = act.dim(3), area = w * h;
  std::vector<Tensor> maps;
  for (std::size_t channel : channels) {
    Tensor a(Shape{w, h}), g(Shape{w, h});
    std::copy_n(act.data().begin() + channel * area, area, a.data().begin());
    std::copy_n(grad.data().begin() + channel * area, area, g.data().begin());
    maps.push_back(gradcam_map(a, g));
  }
  return maps;
}

Tensor channel_heatmap(const TinyCnn& model, const Tensor& image, std::size_t channel, std::size_t cls) {
  const std::size_t one[] = {channel};
  return channel_heatmaps(model, image, one, cls).front();
}

double overlap_score(const std::vector<Tensor>& maps) {
  if (maps.size() < 2) throw std::invalid_argument("overlap_score needs at least two maps");
  for (const auto& m : maps) {
    if (m.shape() != maps[0].shape()) throw ShapeError("overlap_score maps differ in shape");
    double s = 0.0;
    for (double v : m.data()) {
      if (v < 0 || !std::isfinite(v)) throw std::invalid_argument("overlap_score maps must be finite and >= 0");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("overlap_score maps must sum to 1");
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < maps.size(); ++a)
    for (std::size_t b = a + 1; b < maps.size(); ++b, ++pairs)
      for (std::size_t k = 0; k < maps[a].size(); ++k) total += std::min(maps[a][k], maps[b][k]);
  return total / static_cast<double>(pairs);
}

Tensor sum_normalized(const Tensor& map) {
  double s = 0.0;
  for (double v : map.data()) s += v;
  Tensor out(map.shape());
  for (std::size_t k = 0; k < map.size(); ++k)
    out[k] = s > 0 ? map[k] / s : 1.0 / static_cast<double>(map.size());
  return out;
}

double mean_group_overlap(const TinyCnn& model, const ChannelGroups& groups, const Dataset& ds) {
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t cls = ds.labels[i];
    const auto& members = groups.members.at(cls);
    if (members.size() < 2) continue;
    const std::size_t row[] = {i};
    const Tensor img = ds.gather(row);
    std::vector<Tensor> maps = channel_heatmaps(model, img, members, cls);
    for (Tensor& m : maps) m = sum_normalized(m);
    total += overlap_score(maps);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("no group with at least two channels");
  return total / static_cast<double>(counted);
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("PGM export expects a 2-D map");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  for (double v : map.data()) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255))));
}

std::pair<Dataset, Dataset> load_data(const DataSource& src) {
  if (src.synthetic) {
    SyntheticData d = synth_generate(*src.synthetic, src.seed);
    return {std::move(d.train), std::move(d.test)};
  }
  if (src.dir.empty()) throw std::invalid_argument("config names no data source (data.dir or data.synthetic)");
  const std::filesystem::path root(src.dir);
  return {load_dataset(root / "train"), load_dataset(root / "test")};
}

RunArtifacts run_training(const TrainConfig& cfg, const std::filesystem::path& root, const EpochCallback& on_epoch) {
  auto [train_set, test_set] = load_data(cfg.data);
  RunArtifacts art{root / config_hash(cfg), train(cfg, train_set, test_set, on_epoch)};
  std::filesystem::create_directories(art.dir);
  {
    std::ofstream out(art.dir / "config.json", std::ios::trunc);
    out << nlohmann::json(cfg).dump(2) << '\n';
  }
  {
    std::ofstream out(art.dir / "metrics.csv", std::ios::trunc);
    art.result.metrics.write_csv(out);
    if (!out) throw std::runtime_error("cannot write metrics.csv");
  }
  const TrainResult& r = art.result;
  std::vector<const ParameterSet*> sets{&r.model.params(), &r.model.buffers()};
  if (r.head) sets.push_back(&r.head->params());
  save_checkpoint(art.dir / "checkpoint", sets);
  save_checkpoint(art.dir / "best", {&r.best_model.params(), &r.best_model.buffers()});
  nlohmann::json summary{{"seed", cfg.seed},
                         {"objective", objective_name(cfg.objective)},
                         {"final_test_acc", r.metrics.final_accuracy("test")},
                         {"final_train_acc", r.metrics.final_accuracy("train")},
                         {"best_test_acc", r.best_accuracy},
                         {"best_epoch", r.best_epoch},
                         {"mask_draws", r.mask_draws},
                         {"wall_seconds", r.metrics.wall_seconds}};
  if (r.head) {
    const Tensor w = soft_label_weights(r.model, *r.head, test_set);
    const auto rep = top_channels_report(class_mean_weights(w, test_set.labels, test_set.classes),
                                         std::min<std::size_t>(10, r.head->channels()));
    std::ofstream out(art.dir / "top_channels.csv", std::ios::trunc);
    rep.write_csv(out);
    summary["top1_separation"] = rep.top1_separation();
  }
  std::ofstream out(art.dir / "summary.json", std::ios::trunc);
  out << summary.dump(2) << '\n';
  return art;
}

}  // namespace mcl
