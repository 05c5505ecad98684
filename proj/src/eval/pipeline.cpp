#include "mstage/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <thread>

#include "mstage/serialize.hpp"

namespace mstage {

namespace {

template <class T>
void read_optional(const json& j, std::string_view key, std::optional<T>& out, const std::string& path) {
  auto it = j.find(std::string(key));
  if (it == j.end()) return;
  if (it->is_null()) {
    out.reset();
    return;
  }
  T v{};
  read_key(j, key, v, path);
  out = v;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

const json& object_at(const json& j, const char* key, const std::string& path) {
  const auto& v = j.at(key);
  if (!v.is_object()) throw ConfigError(key_path(path, key), "expected an object");
  return v;
}

std::vector<TransformKind> parse_kinds(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected a list of transform names");
  std::vector<TransformKind> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError(path, "expected a list of transform names");
    try {
      out.push_back(parse_transform_kind(v.get<std::string>()));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path, e.what());
    }
  }
  return out;
}

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) {
  return seed ^ (0x9E3779B97F4A7C15ULL * (fold + 1));
}

}  // namespace

// --- config ---------------------------------------------------------------------

json to_json(const TransformConfig& c) {
  return {{"image_size", c.image_size},
          {"gaf", {{"span_constant", c.gaf.span_constant}}},
          {"recurrence",
           {{"embedding_dim", c.recurrence.embedding_dim},
            {"delay", c.recurrence.delay},
            {"threshold", optional_json(c.recurrence.threshold)},
            {"threshold_std_fraction", c.recurrence.threshold_std_fraction}}},
          {"scattering",
           {{"max_order", c.scattering.max_order},
            {"q_first", c.scattering.q_first},
            {"q_second", c.scattering.q_second},
            {"octaves", c.scattering.octaves},
            {"lowpass_scale", c.scattering.lowpass_scale}}}};
}

TransformConfig transform_config_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"image_size", "gaf", "recurrence", "scattering"}, path);
  TransformConfig c;
  read_key(j, "image_size", c.image_size, path);
  if (j.contains("gaf")) {
    const std::string p = key_path(path, "gaf");
    const auto& g = object_at(j, "gaf", path);
    reject_unknown_keys(g, {"span_constant"}, p);
    read_key(g, "span_constant", c.gaf.span_constant, p);
    if (!(c.gaf.span_constant > 0.0)) throw ConfigError(key_path(p, "span_constant"), "must be positive");
  }
  if (j.contains("recurrence")) {
    const std::string p = key_path(path, "recurrence");
    const auto& r = object_at(j, "recurrence", path);
    reject_unknown_keys(r, {"embedding_dim", "delay", "threshold", "threshold_std_fraction"}, p);
    read_key(r, "embedding_dim", c.recurrence.embedding_dim, p);
    read_key(r, "delay", c.recurrence.delay, p);
    read_optional(r, "threshold", c.recurrence.threshold, p);
    read_key(r, "threshold_std_fraction", c.recurrence.threshold_std_fraction, p);
    if (c.recurrence.embedding_dim == 0) throw ConfigError(key_path(p, "embedding_dim"), "must be positive");
    if (c.recurrence.delay == 0) throw ConfigError(key_path(p, "delay"), "must be positive");
  }
  if (j.contains("scattering")) {
    const std::string p = key_path(path, "scattering");
    const auto& s = object_at(j, "scattering", path);
    reject_unknown_keys(s, {"max_order", "q_first", "q_second", "octaves", "lowpass_scale"}, p);
    read_key(s, "max_order", c.scattering.max_order, p);
    read_key(s, "q_first", c.scattering.q_first, p);
    read_key(s, "q_second", c.scattering.q_second, p);
    read_key(s, "octaves", c.scattering.octaves, p);
    read_key(s, "lowpass_scale", c.scattering.lowpass_scale, p);
  }
  return c;
}

json to_json(const AugmentationConfig& c) {
  return {{"jitter_std", optional_json(c.jitter_std)}, {"scale_std", c.scale_std},
          {"n_segments", c.n_segments},                {"magwarp_std", c.magwarp_std},
          {"magwarp_knots", c.magwarp_knots},          {"timewarp_std", c.timewarp_std},
          {"timewarp_knots", c.timewarp_knots}};
}

AugmentationConfig augmentation_config_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j,
                      {"jitter_std", "scale_std", "n_segments", "magwarp_std", "magwarp_knots", "timewarp_std",
                       "timewarp_knots"},
                      path);
  AugmentationConfig c;
  read_optional(j, "jitter_std", c.jitter_std, path);
  read_key(j, "scale_std", c.scale_std, path);
  read_key(j, "n_segments", c.n_segments, path);
  read_key(j, "magwarp_std", c.magwarp_std, path);
  read_key(j, "magwarp_knots", c.magwarp_knots, path);
  read_key(j, "timewarp_std", c.timewarp_std, path);
  read_key(j, "timewarp_knots", c.timewarp_knots, path);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
  return c;
}

json to_json(const SynthSpec& s) {
  return {{"n_per_class", s.n_per_class}, {"classes", s.classes}, {"channels", s.channels},
          {"length", s.length},           {"seed", s.seed},       {"noise_std", s.noise_std}};
}

SynthSpec synth_spec_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"n_per_class", "classes", "channels", "length", "seed", "noise_std"}, path);
  SynthSpec s;
  read_key(j, "n_per_class", s.n_per_class, path);
  read_key(j, "classes", s.classes, path);
  read_key(j, "channels", s.channels, path);
  read_key(j, "length", s.length, path);
  read_key(j, "seed", s.seed, path);
  read_key(j, "noise_std", s.noise_std, path);
  return s;
}

void ExperimentConfig::validate() const {
  if (transforms.empty()) throw ConfigError("transforms", "need at least one transform");
  for (std::size_t i = 0; i < transforms.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (transforms[i] == transforms[k])
        throw ConfigError("transforms", "duplicate transform " + std::string(to_string(transforms[i])));
  if (folds < 2) throw ConfigError("folds", "need at least 2 folds");
  if (run_folds > folds) throw ConfigError("run_folds", "exceeds the fold count");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction", "must be in (0, 1)");
  if (jobs == 0) throw ConfigError("jobs", "must be positive");
  if (branch_budget < 16) throw ConfigError("branch_budget", "must be at least 16");
  if (pair_budget < 32) throw ConfigError("pair_budget", "must be at least 32");
  for (const auto& [k, w] : branch_widths)
    if (w == 0) throw ConfigError(key_path("branch_widths", to_string(k)), "must be positive");
  if (!sequential_widths.empty() && sequential_widths.size() != transforms.size() - 1)
    throw ConfigError("sequential_widths", "need one {previous, new} pair per merge (" +
                                               std::to_string(transforms.size() - 1) + ")");
  for (const auto& [a, b] : sequential_widths)
    if (a == 0 || b == 0) throw ConfigError("sequential_widths", "widths must be positive");
  model.validate("model");
  individual.validate("individual");
  merged.validate("merged");
}

json ExperimentConfig::to_json() const {
  json kinds = json::array();
  for (auto k : transforms) kinds.push_back(std::string(mstage::to_string(k)));
  json widths = json::object();
  for (const auto& [k, w] : branch_widths) widths[std::string(mstage::to_string(k))] = w;
  json seq = json::array();
  for (const auto& [a, b] : sequential_widths) seq.push_back({a, b});
  return {{"dataset", dataset},
          {"synth", mstage::to_json(synth)},
          {"transforms", kinds},
          {"scheme", std::string(mstage::to_string(scheme))},
          {"folds", folds},
          {"run_folds", run_folds},
          {"subject_folds", subject_folds},
          {"validation_fraction", validation_fraction},
          {"balance", balance},
          {"augment_copies", augment_copies},
          {"reaugment", reaugment},
          {"augmentation", mstage::to_json(augmentation)},
          {"transform", mstage::to_json(transform)},
          {"model", model.to_json()},
          {"individual", individual.to_json()},
          {"merged", merged.to_json()},
          {"branch_widths", widths},
          {"branch_budget", branch_budget},
          {"sequential_widths", seq},
          {"pair_budget", pair_budget},
          {"seed", seed},
          {"jobs", jobs}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
  reject_unknown_keys(j,
                      {"dataset", "synth", "transforms", "scheme", "folds", "run_folds", "subject_folds",
                       "validation_fraction", "balance", "augment_copies", "reaugment", "augmentation", "transform",
                       "model", "individual", "merged", "branch_widths", "branch_budget", "sequential_widths",
                       "pair_budget", "seed", "jobs"},
                      "");
  ExperimentConfig c;
  read_key(j, "dataset", c.dataset, "");
  if (j.contains("synth")) c.synth = synth_spec_from_json(object_at(j, "synth", ""), "synth");
  if (j.contains("transforms")) c.transforms = parse_kinds(j.at("transforms"), "transforms");
  if (j.contains("scheme")) {
    std::string s;
    read_key(j, "scheme", s, "");
    try {
      c.scheme = parse_scheme(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("scheme", e.what());
    }
  }
  read_key(j, "folds", c.folds, "");
  read_key(j, "run_folds", c.run_folds, "");
  read_key(j, "subject_folds", c.subject_folds, "");
  read_key(j, "validation_fraction", c.validation_fraction, "");
  read_key(j, "balance", c.balance, "");
  read_key(j, "augment_copies", c.augment_copies, "");
  read_key(j, "reaugment", c.reaugment, "");
  if (j.contains("augmentation"))
    c.augmentation = augmentation_config_from_json(object_at(j, "augmentation", ""), "augmentation");
  if (j.contains("transform")) c.transform = transform_config_from_json(object_at(j, "transform", ""), "transform");
  if (j.contains("model")) c.model = ModelConfig::from_json(object_at(j, "model", ""), "model");
  if (j.contains("individual")) c.individual = StageSettings::from_json(object_at(j, "individual", ""), "individual");
  if (j.contains("merged")) c.merged = StageSettings::from_json(object_at(j, "merged", ""), "merged");
  if (j.contains("branch_widths")) {
    const auto& bw = object_at(j, "branch_widths", "");
    for (const auto& [name, w] : bw.items()) {
      const std::string p = key_path("branch_widths", name);
      TransformKind k;
      try {
        k = parse_transform_kind(name);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(p, e.what());
      }
      std::size_t width = 0;
      read_key(bw, name, width, "branch_widths");
      c.branch_widths[k] = width;
    }
  }
  read_key(j, "branch_budget", c.branch_budget, "");
  if (j.contains("sequential_widths")) {
    const auto& sw = j.at("sequential_widths");
    if (!sw.is_array()) throw ConfigError("sequential_widths", "expected a list of [previous, new] pairs");
    for (std::size_t i = 0; i < sw.size(); ++i) {
      const auto& pair = sw[i];
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_unsigned() || !pair[1].is_number_unsigned())
        throw ConfigError("sequential_widths[" + std::to_string(i) + "]", "expected [previous, new]");
      c.sequential_widths.emplace_back(pair[0].get<std::size_t>(), pair[1].get<std::size_t>());
    }
  }
  read_key(j, "pair_budget", c.pair_budget, "");
  read_key(j, "seed", c.seed, "");
  read_key(j, "jobs", c.jobs, "");
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& file) {
  return from_json(read_json_file(file.string()));
}

// --- data -------------------------------------------------------------------------

LoadedDataset load_dataset(const std::string& spec, const SynthSpec& synth) {
  LoadedDataset d;
  if (spec == "synth") {
    d.manifest = synth_manifest(synth);
    d.windows = synth_generate(synth);
    return d;
  }
  if (spec.rfind("uci:", 0) == 0) {
    const std::filesystem::path dir = spec.substr(4);
    d.manifest.name = "uci-har";
    d.manifest.class_names = kUciClasses;
    d.manifest.channel_names = kUciChannels;
    d.manifest.sampling_rate_hz = 50.0;
    d.manifest.window_length = 128;
    if (std::filesystem::is_directory(dir / "train") && std::filesystem::is_directory(dir / "test")) {
      d.windows = load_uci_raw(dir / "train");
      auto test = load_uci_raw(dir / "test");
      d.windows.insert(d.windows.end(), std::make_move_iterator(test.begin()), std::make_move_iterator(test.end()));
    } else {
      d.windows = load_uci_raw(dir);
    }
    return d;
  }
  d.manifest = DatasetManifest::load(spec);
  d.windows = load_manifest_dataset(spec);
  return d;
}

std::vector<TimeSeriesWindow> augment_training(const std::vector<TimeSeriesWindow>& originals,
                                               const ExperimentConfig& cfg, std::size_t num_classes,
                                               std::uint64_t seed) {
  for (const auto& w : originals)
    if (w.provenance.augmented) throw std::logic_error("augment_training: " + w.id + " is already augmented");
  AugmentationConfig a = cfg.augmentation;
  a.seed = seed;
  auto out = cfg.augment_copies > 0 ? expand_dataset(originals, a, cfg.augment_copies) : originals;
  if (cfg.balance) {
    a.seed = seed ^ 0x5bd1e995ULL;
    out = balance_dataset(out, a, int(num_classes));
  }
  return out;
}

// --- running ----------------------------------------------------------------------

json preprocessing_metadata(const ZScore& z, const ExperimentConfig& cfg, const DatasetManifest& manifest) {
  return {{"zscore", {{"mean", z.mean}, {"std", z.std}}},
          {"transform", to_json(cfg.transform)},
          {"class_names", manifest.class_names},
          {"channel_names", manifest.channel_names},
          {"window_length", manifest.window_length}};
}

namespace {

struct FoldContext {
  const ExperimentConfig& cfg;
  const LoadedDataset& data;
  const FoldSplit& split;
  std::optional<std::filesystem::path> out;
  RunKind kind;
  std::ostream* log;
  std::mutex* log_mutex;
};

void note(const FoldContext& ctx, std::size_t fold, const std::string& msg) {
  if (!ctx.log) return;
  std::lock_guard lock(*ctx.log_mutex);
  *ctx.log << "[fold " << fold << "] " << msg << std::endl;
}

StageResult stage_result(const std::string& name, std::vector<TransformKind> kinds, const TrainReport& r) {
  return {name,        std::move(kinds),         r.validation_iou, r.stop, r.epochs.size(), r.initial_train_loss,
          r.final_train_loss, r.wall_seconds};
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

FoldResult run_fold(const FoldContext& ctx, std::size_t fold) {
  const auto& cfg = ctx.cfg;
  const std::size_t classes = ctx.data.manifest.class_names.size();
  const std::uint64_t seed = fold_seed(cfg.seed, fold);
  FoldResult res;
  res.fold = fold;

  auto part = partition(ctx.data.windows, ctx.split, fold);
  auto [train_orig, validation] = stratified_holdout(part.train, cfg.validation_fraction, seed ^ 1);
  const ZScore z = ZScore::fit(train_orig);
  const json meta = preprocessing_metadata(z, cfg, ctx.data.manifest);
  const std::size_t n_kinds = cfg.transforms.size();

  auto training_set = [&](std::size_t stage, std::span<const TransformKind> kinds) {
    auto aug = augment_training(train_orig, cfg, classes, seed ^ 2 ^ (cfg.reaugment ? stage << 8 : 0));
    FoldPartition audit{aug, part.test};
    res.firewall_violations += firewall_violations(audit);
    for (const auto& w : aug) ctx.split.role(w, fold);  // throws on a source outside the training folds
    res.train_augmented = aug.size() - train_orig.size();
    return make_feature_set(z.apply(aug), kinds, cfg.transform);
  };

  FoldData fd;
  fd.classes = classes;
  fd.train = training_set(0, cfg.transforms);
  fd.validation = make_feature_set(z.apply(validation), cfg.transforms, cfg.transform);
  fd.test = make_feature_set(z.apply(part.test), cfg.transforms, cfg.transform);
  res.train_originals = train_orig.size();
  res.validation = validation.size();
  res.test = part.test.size();

  std::filesystem::path dir;
  if (ctx.out) {
    dir = *ctx.out / ("fold" + std::to_string(fold));
    std::filesystem::create_directories(dir);
  }
  auto save = [&](const std::string& name, Network& net) {
    if (!ctx.out) return;
    const auto file = dir / (name + ".msth");
    save_network(file, net, meta);
    res.model_files[name] = file;
  };

  const auto plan = make_plan(cfg.scheme, cfg.transforms, cfg.transforms, cfg.individual, cfg.merged, seed);
  std::map<TransformKind, std::unique_ptr<FeatureExtractor>> bases;
  std::map<TransformKind, double> scores;
  for (std::size_t i = 0; i < n_kinds; ++i) {
    const auto kind = cfg.transforms[i];
    if (cfg.reaugment && i > 0) {
      const TransformKind one[] = {kind};
      fd.train.inputs[kind] = training_set(i, one).inputs.at(kind);
    }
    auto r = train_individual(kind, fd, cfg.model, cfg.individual, plan.stages[i].seed);
    res.individual_test[kind] = evaluate(r.network, fd.test, classes);
    res.stages.push_back(stage_result(plan.stages[i].name, {kind}, r.report));
    scores[kind] = r.report.validation_iou;
    note(ctx, fold, plan.stages[i].name + ": " + std::to_string(r.report.epochs.size()) + " epochs, val IoU " +
                        fixed3(r.report.validation_iou) + ", test acc " + fixed3(res.individual_test[kind].accuracy));
    save(plan.stages[i].name, r.network);
    auto base = strip_classifier(r.network);
    base->freeze();
    bases[kind] = std::move(base);
  }
  if (ctx.kind == RunKind::individual_only) return res;

  // Best individual first; ties keep the configured order.
  std::vector<TransformKind> order = cfg.transforms;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  std::vector<std::unique_ptr<FeatureExtractor>> ordered;
  for (auto k : order) ordered.push_back(std::move(bases[k]));
  const auto merge_plan = make_plan(cfg.scheme, cfg.transforms, order, cfg.individual, cfg.merged, seed);
  const auto& first_merge = merge_plan.stages[n_kinds];

  if (cfg.reaugment) {
    auto fresh = training_set(n_kinds, order);
    fd.train = std::move(fresh);
  }
  const ClassifierSpec head = default_classifier(classes, cfg.model);
  res.stage_curve.push_back(scores[order.front()]);
  MergedResult merged = [&] {
    if (cfg.scheme == Scheme::two_stage) {
      auto widths = allocate_branch_widths(scores, cfg.branch_budget);
      for (const auto& [k, w] : cfg.branch_widths) widths[k] = w;
      return train_combined(std::move(ordered), widths, fd, head, cfg.merged, first_merge.seed);
    }
    auto widths = cfg.sequential_widths;
    if (widths.empty())
      for (std::size_t n = 1; n < order.size(); ++n)
        widths.push_back(allocate_pair_widths(scores[order.front()], scores[order[n]], cfg.pair_budget));
    return train_sequential(std::move(ordered), widths, fd, head, cfg.merged, first_merge.seed);
  }();
  for (std::size_t s = 0; s < merged.reports.size(); ++s) {
    const auto& entry = merge_plan.stages[n_kinds + s];
    res.stages.push_back(stage_result(entry.name, entry.kinds, merged.reports[s]));
    res.stage_curve.push_back(merged.reports[s].validation_iou);
  }
  res.final_test = evaluate(merged.network, fd.test, classes);
  note(ctx, fold, std::string(to_string(cfg.scheme)) + ": val IoU " + fixed3(res.stage_curve.back()) +
                      ", test acc " + fixed3(res.final_test->accuracy));
  save(std::string(to_string(cfg.scheme)), merged.network);
  return res;
}

void append_rows(std::vector<MetricsRow>& rows, const std::string& dataset, const std::string& scheme,
                 std::size_t fold, const FoldMetrics& m, const std::vector<std::string>& class_names) {
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const auto& pc = m.per_class[c];
    rows.push_back({dataset, scheme, fold, c < class_names.size() ? class_names[c] : std::to_string(c), pc.precision,
                    pc.recall, pc.iou, m.accuracy});
  }
}

json fold_json(const FoldResult& f) {
  json stages = json::array();
  for (const auto& s : f.stages) {
    json kinds = json::array();
    for (auto k : s.kinds) kinds.push_back(std::string(to_string(k)));
    stages.push_back({{"name", s.name},
                      {"kinds", kinds},
                      {"validation_iou", s.validation_iou},
                      {"stop", std::string(to_string(s.stop))},
                      {"epochs", s.epochs},
                      {"initial_train_loss", s.initial_train_loss},
                      {"final_train_loss", s.final_train_loss},
                      {"wall_seconds", s.wall_seconds}});
  }
  return {{"fold", f.fold},
          {"train_originals", f.train_originals},
          {"train_augmented", f.train_augmented},
          {"validation", f.validation},
          {"test", f.test},
          {"firewall_violations", f.firewall_violations},
          {"stage_curve", f.stage_curve},
          {"stages", stages}};
}

}  // namespace

std::vector<StageRow> stage_rows(const std::vector<FoldResult>& folds) {
  std::vector<StageRow> rows;
  if (folds.empty()) return rows;
  const std::size_t n = folds.front().stage_curve.size();
  for (std::size_t s = 0; s < n; ++s) {
    double sum = 0.0;
    for (const auto& f : folds) sum += f.stage_curve.at(s);
    rows.push_back({s + 1, sum / double(folds.size())});
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, RunKind kind,
                                const std::optional<std::filesystem::path>& out, std::ostream* log) {
  cfg.validate();
  if (kind == RunKind::full && cfg.transforms.size() < 2)
    throw ConfigError("transforms", "merging needs at least 2 transforms");
  const auto data = load_dataset(cfg.dataset, cfg.synth);
  if (data.windows.empty()) throw std::invalid_argument("dataset " + cfg.dataset + " has no windows");
  const auto split = cfg.subject_folds ? make_subject_folds(data.windows, cfg.folds, cfg.seed)
                                       : make_folds(data.windows, cfg.folds, cfg.seed, true);
  const std::size_t n_folds = cfg.run_folds == 0 ? cfg.folds : cfg.run_folds;
  if (out) std::filesystem::create_directories(*out);

  std::mutex log_mutex;
  const FoldContext ctx{cfg, data, split, out, kind, log, &log_mutex};
  std::vector<std::optional<FoldResult>> results(n_folds);
  std::vector<std::exception_ptr> errors(n_folds);
  std::mutex next_mutex;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t fold;
      {
        std::lock_guard lock(next_mutex);
        if (next == n_folds) return;
        fold = next++;
      }
      try {
        results[fold] = run_fold(ctx, fold);
      } catch (...) {
        errors[fold] = std::current_exception();
      }
    }
  };
  const std::size_t lanes = std::min(cfg.jobs, n_folds);
  if (lanes <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < lanes; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  ExperimentResult r;
  r.dataset = data.manifest.name;
  r.class_names = data.manifest.class_names;
  for (auto& f : results) r.folds.push_back(std::move(*f));
  for (const auto& f : r.folds) {
    for (auto k : cfg.transforms)
      append_rows(r.metrics, r.dataset, std::string(to_string(k)), f.fold, f.individual_test.at(k), r.class_names);
    if (f.final_test)
      append_rows(r.metrics, r.dataset, std::string(to_string(cfg.scheme)), f.fold, *f.final_test, r.class_names);
  }
  r.stages = stage_rows(r.folds);

  if (out) {
    {
      std::ofstream m(*out / "metrics.csv", std::ios::binary);
      write_metrics_csv(m, r.metrics);
      if (!m) throw std::runtime_error("write failed: " + (*out / "metrics.csv").string());
    }
    if (kind == RunKind::full) {
      std::ofstream s(*out / "stages.csv", std::ios::binary);
      write_stages_csv(s, r.stages);
      if (!s) throw std::runtime_error("write failed: " + (*out / "stages.csv").string());
    }
    json folds = json::array();
    for (const auto& f : r.folds) folds.push_back(fold_json(f));
    std::ofstream run(*out / "run.json");
    run << json{{"config", cfg.to_json()}, {"dataset", r.dataset}, {"folds", folds}}.dump(2) << "\n";
  }
  return r;
}

FoldMetrics evaluate_saved_model(const std::filesystem::path& model_file, const std::vector<TimeSeriesWindow>& windows) {
  const json meta = load_metadata(model_file);
  if (!meta.is_object() || !meta.contains("zscore"))
    throw FormatError(model_file.string() + ": no preprocessing metadata");
  ZScore z;
  std::size_t classes = 0;
  TransformConfig tc;
  try {
    z.mean = meta.at("zscore").at("mean").get<std::vector<double>>();
    z.std = meta.at("zscore").at("std").get<std::vector<double>>();
    classes = meta.at("class_names").size();
    tc = transform_config_from_json(meta.at("transform"), "metadata.transform");
  } catch (const json::exception& e) {
    throw FormatError(model_file.string() + ": bad preprocessing metadata: " + e.what());
  }
  Network net = load_network(model_file);
  if (!net.has_classifier()) throw std::invalid_argument(model_file.string() + ": model has no classifier");
  const auto kinds_set = net.extractor().input_kinds();
  const std::vector<TransformKind> kinds(kinds_set.begin(), kinds_set.end());
  auto data = make_feature_set(z.apply(windows), kinds, tc);
  return evaluate(net, data, classes);
}

}  // namespace mstage
