#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mstage/augmentation.hpp"
#include "mstage/config.hpp"
#include "mstage/dataset.hpp"
#include "mstage/metrics.hpp"
#include "mstage/model.hpp"

namespace mstage {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-7;
};

/// Adam with bias correction. Only trainable parameters move.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg = {});

  /// Throws std::logic_error if a trainable parameter has no gradient buffer.
  void step();
  void zero_grad();
  std::size_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

// --- datasets in transformed form -----------------------------------------------

/// Transformed inputs per sample, column-wise by transform kind.
struct FeatureSet {
  std::map<TransformKind, std::vector<Tensor>> inputs;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::vector<bool> augmented;

  std::size_t size() const noexcept { return labels.size(); }
  /// Stacks the given samples of one kind into [B, ...].
  Tensor stack(TransformKind kind, std::span<const std::size_t> index) const;
};

FeatureSet make_feature_set(const std::vector<TimeSeriesWindow>& windows, std::span<const TransformKind> kinds,
                            const TransformConfig& cfg);

/// Everything a fold needs: training (possibly augmented), validation and test sets.
struct FoldData {
  FeatureSet train, validation, test;
  std::size_t classes = 0;
};

// --- plans and reports -------------------------------------------------------------

struct StageSettings {
  std::size_t max_epochs = 200;
  std::size_t batch_size = 32;
  std::size_t patience = 10;
  AdamConfig adam;

  void validate(const std::string& path) const;
  json to_json() const;
  static StageSettings from_json(const json& j, const std::string& path, StageSettings defaults);
  static StageSettings from_json(const json& j, const std::string& path);
};

enum class Scheme { two_stage, sequential };
std::string_view to_string(Scheme s);
Scheme parse_scheme(std::string_view s);

enum class StageScope { individual, combined, sequential };

struct StageEntry {
  std::string name;
  StageScope scope = StageScope::individual;
  std::vector<TransformKind> kinds;  ///< the transform trained, or the bases merged so far
  StageSettings settings;
  std::uint64_t seed = 0;
};

/// Individual stages for every transform, then either one combined stage or
/// N - 1 sequential merges. Each stage seeds from seed ^ stage index.
struct StagePlan {
  std::vector<StageEntry> stages;
};

StagePlan make_plan(Scheme scheme, std::span<const TransformKind> individual_order,
                    std::span<const TransformKind> merge_order, const StageSettings& individual,
                    const StageSettings& merged, std::uint64_t seed);

enum class StopReason { early_stop, epoch_cap };
std::string_view to_string(StopReason r);

struct EpochRecord {
  double train_loss = 0.0, train_accuracy = 0.0;
  double validation_loss = 0.0, validation_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  StopReason stop = StopReason::epoch_cap;
  std::size_t best_epoch = 0;  ///< zero-based; these weights are the ones kept
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double validation_iou = 0.0;  ///< macro IoU of the kept weights on the validation set
  double wall_seconds = 0.0;
};

/// Raised when the training loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t epoch, const std::string& stage);
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

struct IndividualResult {
  Network network;
  TrainReport report;
};

struct MergedResult {
  Network network;
  std::vector<TrainReport> reports;  ///< one per merge stage
};

IndividualResult train_individual(TransformKind kind, const FoldData& fold, const ModelConfig& model,
                                  const StageSettings& settings, std::uint64_t seed);

/// Bases must be frozen CnnBases; only the branch denses and the new head train.
MergedResult train_combined(std::vector<std::unique_ptr<FeatureExtractor>> bases, const BranchWidthTable& widths,
                            const FoldData& fold, const ClassifierSpec& head, const StageSettings& settings,
                            std::uint64_t seed);

/// Stage n merges the frozen result of stage n - 1 with bases[n]; stage 1's
/// previous extractor is bases[0]. widths[n - 1] = {previous branch, new branch}.
MergedResult train_sequential(std::vector<std::unique_ptr<FeatureExtractor>> bases,
                              const std::vector<std::pair<std::size_t, std::size_t>>& widths, const FoldData& fold,
                              const ClassifierSpec& head, const StageSettings& settings, std::uint64_t seed);

/// Class predictions in inference mode, batch by batch.
std::vector<int> predict(Network& network, const FeatureSet& data, std::size_t batch_size = 64);
FoldMetrics evaluate(Network& network, const FeatureSet& data, std::size_t classes);

/// Mean cross-entropy over a set in inference mode.
double dataset_loss(Network& network, const FeatureSet& data, std::size_t batch_size = 64);

}  // namespace mstage
