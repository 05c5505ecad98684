#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mstage/augmentation.hpp"
#include "mstage/dataset.hpp"
#include "mstage/metrics.hpp"
#include "mstage/model.hpp"
#include "mstage/training.hpp"

namespace mstage {

/// Everything one cross-validated experiment needs. Every field maps to a JSON
/// key of the same name; unknown keys are rejected with their path.
struct ExperimentConfig {
  /// "synth", "uci:<dir>" or the path of a dataset manifest.
  std::string dataset = "synth";
  SynthSpec synth;
  std::vector<TransformKind> transforms{std::begin(kAllTransforms), std::end(kAllTransforms)};
  Scheme scheme = Scheme::two_stage;

  std::size_t folds = 5;
  /// Run only the first n folds (0 runs all of them).
  std::size_t run_folds = 0;
  bool subject_folds = false;
  double validation_fraction = 0.1;

  bool balance = true;
  std::size_t augment_copies = 0;
  /// Draw a fresh augmented training set for every stage instead of reusing one per fold.
  bool reaugment = false;
  AugmentationConfig augmentation;

  TransformConfig transform;
  ModelConfig model;
  StageSettings individual;
  StageSettings merged;

  /// Explicit two-stage branch widths; missing kinds are allocated from validation IoU.
  BranchWidthTable branch_widths;
  std::size_t branch_budget = 240;
  /// Explicit {previous, new} widths per sequential merge; empty allocates them.
  std::vector<std::pair<std::size_t, std::size_t>> sequential_widths;
  std::size_t pair_budget = 256;

  std::uint64_t seed = 42;
  std::size_t jobs = 1;

  void validate() const;
  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::filesystem::path& file);
};

json to_json(const TransformConfig& c);
TransformConfig transform_config_from_json(const json& j, const std::string& path);
json to_json(const AugmentationConfig& c);
AugmentationConfig augmentation_config_from_json(const json& j, const std::string& path);
json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const json& j, const std::string& path);

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<TimeSeriesWindow> windows;
};

/// Resolves the dataset field of a config. A UCI directory holding train/ and
/// test/ loads both splits.
LoadedDataset load_dataset(const std::string& spec, const SynthSpec& synth = {});

/// Train-fold augmentation: `copies` variants per original, then class balancing.
std::vector<TimeSeriesWindow> augment_training(const std::vector<TimeSeriesWindow>& originals,
                                               const ExperimentConfig& cfg, std::size_t num_classes,
                                               std::uint64_t seed);

enum class RunKind { individual_only, full };

struct StageResult {
  std::string name;
  std::vector<TransformKind> kinds;
  double validation_iou = 0.0;
  StopReason stop = StopReason::epoch_cap;
  std::size_t epochs = 0;
  double initial_train_loss = 0.0, final_train_loss = 0.0;
  double wall_seconds = 0.0;
};

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_originals = 0, train_augmented = 0, validation = 0, test = 0;
  /// Augmented windows found in the test set or derived from it. Must be zero.
  std::size_t firewall_violations = 0;
  std::map<TransformKind, FoldMetrics> individual_test;
  std::optional<FoldMetrics> final_test;
  /// Individual stages in training order, then merge stages.
  std::vector<StageResult> stages;
  /// Validation IoU per stage of the merge curve: best individual first, then each merge.
  std::vector<double> stage_curve;
  std::map<std::string, std::filesystem::path> model_files;
};

struct ExperimentResult {
  std::string dataset;
  std::vector<std::string> class_names;
  std::vector<FoldResult> folds;
  std::vector<MetricsRow> metrics;
  std::vector<StageRow> stages;
};

/// Runs every fold (in parallel with cfg.jobs, aggregated in fold order) and,
/// when `out` is set, writes metrics.csv, stages.csv, run.json and model files.
/// Progress lines go to `log` when given.
ExperimentResult run_experiment(const ExperimentConfig& cfg, RunKind kind,
                                const std::optional<std::filesystem::path>& out, std::ostream* log = nullptr);

/// Per-stage cross-fold mean of the merge curve.
std::vector<StageRow> stage_rows(const std::vector<FoldResult>& folds);

/// Z-score, transform settings and class names stored with each saved model.
json preprocessing_metadata(const ZScore& z, const ExperimentConfig& cfg, const DatasetManifest& manifest);

/// Applies a saved model's preprocessing to raw windows and scores them.
FoldMetrics evaluate_saved_model(const std::filesystem::path& model_file, const std::vector<TimeSeriesWindow>& windows);

}  // namespace mstage
