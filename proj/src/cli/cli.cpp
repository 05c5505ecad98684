#include "mstage/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "mstage/pipeline.hpp"
#include "mstage/serialize.hpp"

namespace mstage {

namespace {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dataset;
  std::optional<std::string> transforms;
  std::optional<std::string> scheme;
  std::optional<std::size_t> folds;
  std::optional<std::size_t> jobs;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_out) {
  cmd->add_option("--config", f.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Master seed");
  cmd->add_option("--dataset", f.dataset, "synth, uci:<dir> or a dataset manifest path");
  cmd->add_option("--transforms", f.transforms, "Comma-separated: identity,scattering,gaf,recurrence");
  cmd->add_option("--scheme", f.scheme, "two-stage or sequential");
  cmd->add_option("--folds", f.folds, "Cross-validation folds");
  cmd->add_option("--jobs", f.jobs, "Folds trained in parallel");
  auto* o = cmd->add_option("--out", f.out, "Output directory");
  if (needs_out) o->required();
}

std::vector<TransformKind> parse_transform_list(const std::string& text) {
  std::vector<TransformKind> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_transform_kind(item));
  return out;
}

/// Defaults, then the config file, then explicit flags.
ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(f.config);
  if (f.seed) {
    c.seed = *f.seed;
    c.synth.seed = *f.seed;
  }
  if (f.dataset) c.dataset = *f.dataset;
  if (f.transforms) c.transforms = parse_transform_list(*f.transforms);
  if (f.scheme) c.scheme = parse_scheme(*f.scheme);
  if (f.folds) c.folds = *f.folds;
  if (f.jobs) c.jobs = *f.jobs;
  c.validate();
  return c;
}

void write_dataset(const fs::path& dir, const DatasetManifest& base, const std::vector<TimeSeriesWindow>& windows,
                   const std::string& csv_name) {
  fs::create_directories(dir);
  DatasetManifest m = base;
  m.sources = {csv_name};
  write_canonical_csv(dir / csv_name, windows);
  std::ofstream(dir / "manifest.json") << m.to_json().dump(2) << "\n";
}

void print_summary(std::ostream& out, const ExperimentResult& r) {
  std::map<std::string, std::vector<FoldMetrics>> by_scheme;
  std::map<std::string, std::map<std::size_t, FoldMetrics>> folds;
  for (const auto& row : r.metrics) {
    auto& fm = folds[row.scheme][row.fold];
    ClassMetrics cm;
    cm.precision = row.precision;
    cm.recall = row.recall;
    cm.iou = row.iou;
    fm.per_class.push_back(cm);
    fm.accuracy = row.accuracy;
  }
  for (auto& [scheme, fs_] : folds)
    for (auto& [k, fm] : fs_) by_scheme[scheme].push_back(fm);
  for (const auto& [scheme, fm] : by_scheme) {
    auto agg = aggregate_folds(fm);
    out << scheme << ": accuracy " << format_mean_std(agg.accuracy) << ", mean IoU " << format_mean_std(agg.mean_iou)
        << "\n";
  }
  if (!r.stages.empty()) {
    out << "stage curve (mean validation IoU):";
    for (const auto& s : r.stages) out << " " << s.stage << "=" << format_number(s.mean_iou);
    out << "\n";
  }
}

int cmd_synth(const CommonFlags& f, std::ostream& out) {
  auto c = resolve_config(f);
  auto windows = synth_generate(c.synth);
  write_dataset(f.out, synth_manifest(c.synth), windows, "synth.csv");
  out << "wrote " << windows.size() << " windows to " << (fs::path(f.out) / "manifest.json").string() << "\n";
  return 0;
}

int cmd_transform(const CommonFlags& f, std::ostream& out) {
  auto c = resolve_config(f);
  auto data = load_dataset(c.dataset, c.synth);
  fs::create_directories(f.out);
  for (auto kind : c.transforms) {
    TensorArchive a;
    json ids = json::array(), labels = json::array();
    for (const auto& w : data.windows) {
      auto t = transform_window(w, kind, c.transform);
      a.tensors.push_back({w.id, std::move(t.tensor), false});
      ids.push_back(w.id);
      labels.push_back(w.label ? json(*w.label) : json(nullptr));
    }
    a.architecture = {{"transform", std::string(to_string(kind))},
                      {"settings", to_json(c.transform)},
                      {"class_names", data.manifest.class_names},
                      {"labels", labels}};
    const auto file = fs::path(f.out) / (std::string(to_string(kind)) + ".msth");
    a.save(file);
    out << "wrote " << a.tensors.size() << " " << to_string(kind) << " tensors to " << file.string() << "\n";
  }
  return 0;
}

int cmd_augment(const CommonFlags& f, std::size_t copies, std::ostream& out) {
  auto c = resolve_config(f);
  c.augment_copies = copies;
  auto data = load_dataset(c.dataset, c.synth);
  auto aug = augment_training(data.windows, c, data.manifest.class_names.size(), c.seed);
  write_dataset(f.out, data.manifest, aug, "augmented.csv");
  out << "wrote " << aug.size() << " windows (" << aug.size() - data.windows.size() << " augmented) to "
      << (fs::path(f.out) / "manifest.json").string() << "\n";
  return 0;
}

int cmd_train(const CommonFlags& f, std::optional<Scheme> scheme, RunKind kind, std::ostream& out,
              std::ostream& err) {
  auto c = resolve_config(f);
  if (scheme) {
    if (f.scheme && parse_scheme(*f.scheme) != *scheme)
      throw ConfigError("scheme", "--scheme " + *f.scheme + " contradicts the subcommand");
    c.scheme = *scheme;
  }
  auto r = run_experiment(c, kind, fs::path(f.out), &err);
  print_summary(out, r);
  std::size_t breaches = 0;
  for (const auto& fold : r.folds) breaches += fold.firewall_violations;
  out << "firewall violations: " << breaches << "\n";
  out << "wrote " << (fs::path(f.out) / "metrics.csv").string() << "\n";
  return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& model, std::ostream& out) {
  auto c = resolve_config(f);
  auto data = load_dataset(c.dataset, c.synth);
  auto m = evaluate_saved_model(model, data.windows);
  out << "accuracy " << format_number(m.accuracy) << ", mean IoU " << format_number(m.mean_iou()) << "\n";
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    std::vector<MetricsRow> rows;
    for (std::size_t k = 0; k < m.per_class.size(); ++k) {
      const auto& pc = m.per_class[k];
      rows.push_back({data.manifest.name, fs::path(model).stem().string(), 0,
                      k < data.manifest.class_names.size() ? data.manifest.class_names[k] : std::to_string(k),
                      pc.precision, pc.recall, pc.iou, m.accuracy});
    }
    std::ofstream csv(fs::path(f.out) / "metrics.csv", std::ios::binary);
    write_metrics_csv(csv, rows);
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_dir, std::ostream& out) {
  std::vector<MetricsRow> rows;
  std::vector<std::pair<std::string, std::vector<StageRow>>> curves;
  std::set<std::string> seen;
  for (const auto& in : inputs) {
    std::ifstream m(fs::path(in) / "metrics.csv", std::ios::binary);
    if (!m) throw std::runtime_error("cannot open " + (fs::path(in) / "metrics.csv").string());
    // Runs sharing a seed repeat the individual schemes; the first directory wins.
    std::set<std::string> here;
    for (auto& row : read_metrics_csv(m)) {
      if (seen.count(row.scheme)) continue;
      here.insert(row.scheme);
      rows.push_back(std::move(row));
    }
    seen.insert(here.begin(), here.end());
    std::ifstream s(fs::path(in) / "stages.csv", std::ios::binary);
    if (s) curves.emplace_back(in, read_stages_csv(s));
  }
  // scheme -> fold -> class rows, in first-seen class order
  std::map<std::string, std::map<std::size_t, FoldMetrics>> folds;
  std::map<std::string, std::vector<std::string>> class_order;
  for (const auto& row : rows) {
    auto& fm = folds[row.scheme][row.fold];
    ClassMetrics cm;
    cm.precision = row.precision;
    cm.recall = row.recall;
    cm.iou = row.iou;
    fm.per_class.push_back(cm);
    fm.accuracy = row.accuracy;
    auto& order = class_order[row.scheme];
    if (std::find(order.begin(), order.end(), row.class_name) == order.end()) order.push_back(row.class_name);
  }

  fs::create_directories(out_dir);
  std::ofstream summary(fs::path(out_dir) / "summary.csv", std::ios::binary);
  summary << "scheme,class,precision,recall,iou,iou_mean,iou_std\n";
  std::ofstream series(fs::path(out_dir) / "iou_by_class.csv", std::ios::binary);
  series << "scheme,class,mean_iou\n";
  std::map<std::string, std::vector<double>> accuracies;
  for (const auto& [scheme, per_fold] : folds) {
    std::vector<FoldMetrics> fm;
    for (const auto& [k, m] : per_fold) {
      fm.push_back(m);
      accuracies[scheme].push_back(m.accuracy);
    }
    const auto agg = aggregate_folds(fm);
    const auto& names = class_order[scheme];
    for (std::size_t c = 0; c < agg.iou.size(); ++c) {
      summary << scheme << "," << names.at(c) << "," << format_mean_std(agg.precision[c]) << ","
              << format_mean_std(agg.recall[c]) << "," << format_mean_std(agg.iou[c]) << ","
              << format_number(agg.iou[c].mean) << "," << format_number(agg.iou[c].std) << "\n";
      series << scheme << "," << names.at(c) << "," << format_number(agg.iou[c].mean) << "\n";
    }
    summary << scheme << ",accuracy,,,," << format_number(agg.accuracy.mean) << "," << format_number(agg.accuracy.std)
            << "\n";
    out << scheme << ": accuracy " << format_mean_std(agg.accuracy) << ", mean IoU " << format_mean_std(agg.mean_iou)
        << "\n";
  }

  std::ofstream stage_series(fs::path(out_dir) / "stage_iou.csv", std::ios::binary);
  stage_series << "run,stage,mean_iou\n";
  for (const auto& [run, curve] : curves)
    for (const auto& s : curve) stage_series << run << "," << s.stage << "," << format_number(s.mean_iou) << "\n";

  const bool have_both = accuracies.count("two-stage") && accuracies.count("sequential");
  if (have_both) {
    const auto& a = accuracies["sequential"];
    const auto& b = accuracies["two-stage"];
    auto w = wilcoxon_rank_sum(a, b);
    std::ofstream t(fs::path(out_dir) / "wilcoxon.txt");
    t << "sequential vs two-stage fold accuracies: W = " << format_number(w.statistic)
      << ", p = " << format_number(w.p_value) << (w.exact ? " (exact)" : " (normal approximation)")
      << ", alpha = " << format_number(w.alpha) << ", " << (w.significant() ? "significant" : "not significant")
      << "\n";
    out << "wilcoxon p = " << format_number(w.p_value) << "\n";
  }
  out << "wrote report to " << out_dir << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-stage transform-ensemble training for sensor activity recognition", "mstage"};
  app.require_subcommand(1);

  CommonFlags synth_f, transform_f, augment_f, ind_f, two_f, seq_f, eval_f;
  std::size_t copies = 1;
  std::string model_file;
  std::vector<std::string> report_in;
  std::string report_out;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset (manifest + canonical CSV)");
  add_common(synth, synth_f, true);
  auto* transform = app.add_subcommand("transform", "Materialize transformed tensors, one archive per transform");
  add_common(transform, transform_f, true);
  auto* augment = app.add_subcommand("augment", "Write an augmented, class-balanced copy of a dataset");
  add_common(augment, augment_f, true);
  augment->add_option("--copies", copies, "Augmented variants per window before balancing");
  auto* ind = app.add_subcommand("train-individual", "Train one network per transform, cross-validated");
  add_common(ind, ind_f, true);
  auto* two = app.add_subcommand("train-two-stage", "Individual stages, then one combined stage");
  add_common(two, two_f, true);
  auto* seq = app.add_subcommand("train-sequential", "Individual stages, then pairwise sequential merges");
  add_common(seq, seq_f, true);
  auto* eval = app.add_subcommand("evaluate", "Score a saved model on a dataset");
  add_common(eval, eval_f, false);
  eval->add_option("--model", model_file, "Model file written by a training run")->required()->check(CLI::ExistingFile);
  auto* report = app.add_subcommand("report", "Cross-fold summary, plot-ready series and a Wilcoxon comparison");
  report->add_option("--in", report_in, "Result directories holding metrics.csv")->required();
  report->add_option("--out", report_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*synth) return cmd_synth(synth_f, out);
    if (*transform) return cmd_transform(transform_f, out);
    if (*augment) return cmd_augment(augment_f, copies, out);
    if (*ind) return cmd_train(ind_f, std::nullopt, RunKind::individual_only, out, err);
    if (*two) return cmd_train(two_f, Scheme::two_stage, RunKind::full, out, err);
    if (*seq) return cmd_train(seq_f, Scheme::sequential, RunKind::full, out, err);
    if (*eval) return cmd_evaluate(eval_f, model_file, out);
    if (*report) return cmd_report(report_in, report_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace mstage
