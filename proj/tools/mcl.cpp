// mcl: dataset synthesis, channel assignment, training, evaluation and reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "mcl/ablation.hpp"
#include "mcl/gradsuite.hpp"
#include "mcl/malloc_tuning.hpp"
#include "mcl/train.hpp"

namespace fs = std::filesystem;
using namespace mcl;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kNumerical = 2;

struct Loaded {
  TrainConfig cfg;
  TinyCnn model;
  std::optional<SoftLabelHead> head;
};

Loaded load_run(const fs::path& run, const std::string& which) {
  Loaded l;
  l.cfg = load_train_config(run / "config.json");
  auto [train_set, test_set] = load_data(l.cfg.data);
  const std::size_t classes = test_set.classes;
  const std::size_t n = l.cfg.feature_channels(classes);
  l.model = TinyCnn::build(TinyCnnConfig::desk(classes, n, test_set.images.dim(2)), 0);
  const ParameterSet saved = load_checkpoint(run / which);
  for (auto* set : {&l.model.params(), &l.model.buffers()})
    for (auto& p : set->items()) {
      const Tensor& t = saved.get(p.name);
      if (t.shape() != p.value.shape()) throw FormatError("checkpoint tensor " + p.name + " has the wrong shape");
      p.value = t;
    }
  if (l.cfg.objective == Objective::Soft) {
    ParameterSet hp;
    for (const char* name : {"se.a1.weight", "se.a1.bias", "se.a2.weight", "se.a2.bias"}) hp.add(name, saved.get(name));
    l.head = SoftLabelHead::from_params(std::move(hp));
  }
  return l;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cmd_synth(const fs::path& out, const std::string& spec_path, SyntheticPartsSpec spec, std::uint64_t seed) {
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw std::runtime_error("cannot open spec file " + spec_path);
    spec = nlohmann::json::parse(in).get<SyntheticPartsSpec>();
  }
  const SyntheticData data = synth_generate(spec, seed);
  save_synthetic(out, data);
  std::cout << "wrote " << data.train.size() << " train / " << data.test.size() << " test samples ("
            << spec.classes << " classes) to " << out.string() << "\n"
            << "nearest-centroid test accuracy: " << fmt("%.4f", nearest_centroid_accuracy(data.train, data.test))
            << "\n";
  return kOk;
}

int cmd_train(const fs::path& config, const fs::path& out, bool quiet) {
  TrainConfig cfg = load_train_config(config);
  apply_env_overrides(cfg);
  auto log = [&](const EpochMetrics& tr, const EpochMetrics& te) {
    if (quiet) return;
    std::printf("epoch %3zu  lr %.4g  train acc %.4f  l_ce %.4f  l_dis %.4f  l_div %.4f  l_total %.4f  test acc %.4f\n",
                tr.epoch, lr_at(tr.epoch, cfg), tr.acc, tr.l_ce, tr.l_dis, tr.l_div, tr.l_total, te.acc);
    std::fflush(stdout);
  };
  const RunArtifacts art = run_training(cfg, out, log);
  std::cout << "run directory: " << art.dir.string() << "\n"
            << "final test accuracy: " << fmt("%.4f", art.result.metrics.final_accuracy("test")) << "\n"
            << "best test accuracy: " << fmt("%.4f", art.result.best_accuracy) << " (epoch " << art.result.best_epoch
            << ")\n";
  return kOk;
}

int cmd_eval(const fs::path& run, const std::string& which) {
  const Loaded l = load_run(run, which);
  auto [train_set, test_set] = load_data(l.cfg.data);
  const EvalResult tr = evaluate(l.model, train_set);
  const EvalResult te = evaluate(l.model, test_set);
  std::cout << "train acc " << fmt("%.4f", tr.acc) << "  l_ce " << fmt("%.6f", tr.l_ce) << "\n"
            << "test acc " << fmt("%.4f", te.acc) << "  l_ce " << fmt("%.6f", te.l_ce) << "\n";
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  double worst = 0.0;
  bool ok = true;
  for (const auto& e : run_gradient_suite(seed)) {
    std::printf("%-22s max rel error %.3e%s\n", e.name.c_str(), e.result.max_rel_error,
                e.result.ok ? "" : ("  " + e.result.failure).c_str());
    worst = std::max(worst, e.result.max_rel_error);
    ok = ok && e.result.ok;
  }
  std::printf("max relative error %.3e (threshold 1e-4)\n", worst);
  return ok && worst < 1e-4 ? kOk : kNumerical;
}

int cmd_heatmaps(const fs::path& run, const fs::path& out, std::size_t samples) {
  const Loaded l = load_run(run, "checkpoint");
  auto [train_set, test_set] = load_data(l.cfg.data);
  const std::size_t classes = test_set.classes;
  const ChannelGroups groups =
      ChannelGroups::from(make_assignment(l.cfg.mc, classes, l.cfg.feature_channels(classes)));
  fs::create_directories(out);
  const std::size_t n = std::min(samples, test_set.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row[] = {i};
    const Tensor img = test_set.gather(row);
    const std::size_t cls = test_set.labels[i];
    const std::size_t s = img.dim(2);
    write_pgm(out / ("sample" + std::to_string(i) + "_input.pgm"), img.reshaped({s, s}));
    for (std::size_t ch : groups.members[cls])
      write_pgm(out / ("sample" + std::to_string(i) + "_class" + std::to_string(cls) + "_ch" + std::to_string(ch) + ".pgm"),
                channel_heatmap(l.model, img, ch, cls));
  }
  std::cout << "wrote heatmaps for " << n << " samples to " << out.string() << "\n";
  if (groups.members[0].size() >= 2)
    std::cout << "mean within-group overlap (test set): " << fmt("%.4f", mean_group_overlap(l.model, groups, test_set))
              << "\n";
  return kOk;
}

std::string variant_label(const nlohmann::json& cfg) {
  const std::string obj = cfg.at("objective");
  if (obj == "ce") return "ce";
  const auto& mc = cfg.at("mc");
  std::ostringstream os;
  os << obj << " xi=" << (mc.at("xi").is_string() ? mc.at("xi").get<std::string>() : std::to_string(mc.at("xi").get<int>()))
     << " mu=" << mc.at("mu").get<double>() << " lambda=" << mc.at("lambda").get<double>()
     << " div=" << mc.at("diversity").get<std::string>() << " pool=" << mc.at("pooling").get<std::string>()
     << " cwa=" << (mc.at("cwa").get<bool>() ? "on" : "off");
  return os.str();
}

int cmd_report(const std::vector<fs::path>& roots, const fs::path& csv_out) {
  struct Row {
    std::vector<double> acc;
    std::vector<std::uint64_t> seeds;
  };
  std::map<std::string, Row> table;
  std::vector<fs::path> runs;
  for (const auto& r : roots) {
    if (fs::exists(r / "summary.json")) {
      runs.push_back(r);
      continue;
    }
    if (!fs::is_directory(r)) throw std::runtime_error("not a run directory: " + r.string());
    for (const auto& e : fs::directory_iterator(r))
      if (fs::exists(e.path() / "summary.json")) runs.push_back(e.path());
  }
  std::sort(runs.begin(), runs.end());
  std::ofstream csv;
  if (!csv_out.empty()) {
    csv.open(csv_out, std::ios::trunc);
    csv << "run,variant,seed,final_test_acc,best_test_acc\n";
  }
  for (const auto& run : runs) {
    std::ifstream sj(run / "summary.json"), cj(run / "config.json");
    const auto summary = nlohmann::json::parse(sj);
    const auto config = nlohmann::json::parse(cj);
    const std::string label = variant_label(config);
    auto& row = table[label];
    row.acc.push_back(summary.at("final_test_acc").get<double>());
    row.seeds.push_back(summary.at("seed").get<std::uint64_t>());
    if (csv.is_open())
      csv << run.filename().string() << ",\"" << label << "\"," << summary.at("seed") << ','
          << fmt("%.6f", summary.at("final_test_acc").get<double>()) << ','
          << fmt("%.6f", summary.at("best_test_acc").get<double>()) << '\n';
  }
  std::printf("%-70s %5s %10s\n", "variant", "runs", "mean acc");
  for (const auto& [label, row] : table) {
    double m = 0;
    for (double a : row.acc) m += a;
    std::printf("%-70s %5zu %10.4f\n", label.c_str(), row.acc.size(), m / static_cast<double>(row.acc.size()));
  }
  return kOk;
}

int cmd_ablate(const fs::path& base_path, const std::vector<std::uint64_t>& seeds, const fs::path& out) {
  const TrainConfig base = load_train_config(base_path);
  auto variants = ablation_variants(base, load_data(base.data).first.classes);
  std::printf("%-12s", "variant");
  for (auto s : seeds) std::printf("   seed %-4llu", static_cast<unsigned long long>(s));
  std::printf("   mean\n");
  for (auto& v : variants) {
    double sum = 0;
    std::printf("%-12s", v.name.c_str());
    for (auto s : seeds) {
      v.cfg.seed = s;
      const RunArtifacts art = run_training(v.cfg, out, {});
      const double acc = art.result.metrics.final_accuracy("test");
      sum += acc;
      std::printf("   %9.4f", acc);
      std::fflush(stdout);
    }
    std::printf("   %7.4f\n", sum / static_cast<double>(seeds.size()));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_malloc_for_training();
  CLI::App app{"Mutual-channel loss experiments on synthetic localized-parts data"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  fs::path synth_out;
  std::string synth_spec;
  SyntheticPartsSpec spec;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--spec", synth_spec, "Generator spec JSON (overrides the flags below)");
  synth->add_option("--classes", spec.classes, "Number of classes");
  synth->add_option("--parts", spec.parts_per_class, "Parts per class");
  synth->add_option("--size", spec.image_size, "Image side length");
  synth->add_option("--glyph", spec.glyph_size, "Glyph side length");
  synth->add_option("--noise", spec.noise, "Pixel noise std");
  synth->add_option("--train", spec.train_samples, "Training samples");
  synth->add_option("--test", spec.test_samples, "Test samples");
  synth->add_option("--flips", spec.glyph_flips, "Pixels flipped from the shared base glyphs");
  synth->add_option("--foreign", spec.foreign_parts, "Distractor parts from other classes per image");
  synth->add_option("--layout", spec.layout, "Part placement: slots or uniform")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, SyntheticPartsSpec::Layout>{{"slots", SyntheticPartsSpec::Layout::Slots},
                                                            {"uniform", SyntheticPartsSpec::Layout::Uniform}},
          CLI::ignore_case));
  synth->add_option("--seed", synth_seed, "Generator seed");

  auto* assign = app.add_subcommand("assign", "Print the channel assignment for N channels and c classes");
  std::size_t channels = 0, classes = 0, xi = 0;
  assign->add_option("--channels", channels, "Feature channels N")->required();
  assign->add_option("--classes", classes, "Classes c")->required();
  assign->add_option("--xi", xi, "Uniform channels per class (N must equal c*xi)");

  auto* train_cmd = app.add_subcommand("train", "Train one configuration");
  fs::path train_config, runs_root = "runs";
  bool quiet = false;
  train_cmd->add_option("--config", train_config, "TrainConfig JSON")->required();
  train_cmd->add_option("--out", runs_root, "Root for run directories");
  train_cmd->add_flag("--quiet", quiet, "No per-epoch log");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained run on its train and test splits");
  fs::path eval_run;
  std::string which = "checkpoint";
  eval->add_option("--run", eval_run, "Run directory")->required();
  eval->add_option("--which", which, "checkpoint (final) or best")->check(CLI::IsMember({"checkpoint", "best"}));

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss component");
  std::uint64_t grad_seed = 7;
  grad->add_option("--seed", grad_seed, "Input seed");

  auto* heat = app.add_subcommand("heatmaps", "Export Grad-CAM channel maps as PGM");
  fs::path heat_run, heat_out;
  std::size_t heat_samples = 8;
  heat->add_option("--run", heat_run, "Run directory")->required();
  heat->add_option("--out", heat_out, "Output directory")->required();
  heat->add_option("--samples", heat_samples, "Test samples to export");

  auto* report = app.add_subcommand("report", "Summarise run directories");
  std::vector<fs::path> report_roots;
  fs::path report_csv;
  report->add_option("runs", report_roots, "Run directories or roots containing them")->required();
  report->add_option("--csv", report_csv, "Write a per-run CSV");

  auto* ablate = app.add_subcommand("ablate", "Run the paired ablation table over seeds");
  fs::path ablate_config;
  std::vector<std::uint64_t> ablate_seeds{0, 1, 2};
  fs::path ablate_out = "runs";
  ablate->add_option("--config", ablate_config, "Base TrainConfig JSON")->required();
  ablate->add_option("--seeds", ablate_seeds, "Seeds")->delimiter(',');
  ablate->add_option("--out", ablate_out, "Root for run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_spec, spec, synth_seed);
    if (*assign) {
      const ChannelAssignment a = xi ? uniform_assignment(classes, xi) : solve_channel_assignment(channels, classes);
      if (a.channels() != channels)
        throw std::invalid_argument("c*xi = " + std::to_string(a.channels()) + " != channels " + std::to_string(channels));
      std::cout << a.summary() << "\n";
      return kOk;
    }
    if (*train_cmd) return cmd_train(train_config, runs_root, quiet);
    if (*eval) return cmd_eval(eval_run, which);
    if (*grad) return cmd_gradcheck(grad_seed);
    if (*heat) return cmd_heatmaps(heat_run, heat_out, heat_samples);
    if (*report) return cmd_report(report_roots, report_csv);
    if (*ablate) return cmd_ablate(ablate_config, ablate_seeds, ablate_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kValidation;
}
