#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mstage/config.hpp"
#include "mstage/ops.hpp"
#include "mstage/transforms.hpp"

namespace mstage {

using Rng = std::mt19937_64;

enum class Dim { d1, d2 };

struct ResidualBlockSpec {
  std::size_t kernel = 5;
  std::size_t filters = 64;
  std::size_t stride = 2;
  Dim dim = Dim::d1;
  /// `valid` shrinks the separable path but not the 1x1 shortcut, which is rejected.
  Padding padding = Padding::same;
  double bn_momentum = kBatchNormMomentum;
};

struct CnnBaseSpec {
  Dim dim = Dim::d1;
  Shape input_shape;  ///< [C, L] or [C, H, W], no batch axis
  std::vector<ResidualBlockSpec> blocks;

  std::size_t feature_length() const { return blocks.empty() ? 0 : blocks.back().filters; }
  /// Throws DimensionError naming the first inconsistent block.
  void validate() const;
  json to_json() const;
  static CnnBaseSpec from_json(const json& j, const std::string& path = "base");
};

/// Layer widths for the dense head; the last one is the class count.
struct ClassifierSpec {
  std::vector<std::size_t> widths;

  std::size_t classes() const { return widths.empty() ? 0 : widths.back(); }
  void validate() const;
};

/// Filters and kernels for the 1D and 2D trunks, and the dense head.
struct ModelConfig {
  std::vector<std::size_t> filters_1d = {128, 256, 256, 256};
  std::size_t kernel_1d = 5;
  std::vector<std::size_t> filters_2d = {32, 64, 128};
  std::size_t kernel_2d = 3;
  std::size_t stride = 2;
  std::vector<std::size_t> classifier_hidden = {128};
  /// Running-statistics momentum; small datasets see few batches and need a lower value.
  double bn_momentum = kBatchNormMomentum;

  void validate(const std::string& path = "model") const;
  json to_json() const;
  static ModelConfig from_json(const json& j, const std::string& path = "model");
};

/// 1D trunk for identity and scattering, 2D trunk for the image transforms.
CnnBaseSpec default_base_spec(TransformKind kind, const Shape& input_shape, const ModelConfig& cfg = {});
ClassifierSpec default_classifier(std::size_t classes, const ModelConfig& cfg = {});

/// Named view of every stored tensor: parameters plus batch-norm running statistics.
struct StateEntry {
  std::string name;
  Tensor* tensor = nullptr;
  Parameter* param = nullptr;  ///< null for running statistics
  bool trainable() const { return param && param->trainable; }
};

using Inputs = std::map<TransformKind, Var>;

// --- layers -------------------------------------------------------------------

struct DenseLayer {
  Parameter w;  ///< [in, out]
  Parameter b;  ///< [out]

  DenseLayer() = default;
  DenseLayer(const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Var forward(Tape& tape, Var x);
  std::size_t in() const { return w.value.dim(0); }
  std::size_t out() const { return w.value.dim(1); }
  void collect(const std::string& prefix, std::vector<StateEntry>& out);
};

struct BatchNormLayer {
  Parameter gamma, beta;
  BatchNormStats stats;
  double momentum = kBatchNormMomentum;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name, std::size_t channels, double momentum = kBatchNormMomentum);
  Var forward(Tape& tape, Var x, NormMode mode);
  void collect(const std::string& prefix, std::vector<StateEntry>& out);
};

struct SeparableConvLayer {
  Dim dim = Dim::d1;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  Parameter depthwise;  ///< [C, K] or [C, K, K]
  Parameter pointwise;  ///< [F, C, 1] or [F, C, 1, 1]
  Parameter bias;

  SeparableConvLayer() = default;
  SeparableConvLayer(const std::string& name, Dim dim, std::size_t c_in, std::size_t filters, std::size_t kernel,
                     std::size_t stride, Padding padding, Rng& rng);
  Var forward(Tape& tape, Var x);
  void collect(const std::string& prefix, std::vector<StateEntry>& out);
};

struct PointwiseConvLayer {
  Dim dim = Dim::d1;
  std::size_t stride = 1;
  Parameter w;  ///< [F, C, 1] or [F, C, 1, 1]
  Parameter bias;

  PointwiseConvLayer() = default;
  PointwiseConvLayer(const std::string& name, Dim dim, std::size_t c_in, std::size_t filters, std::size_t stride,
                     Rng& rng);
  Var forward(Tape& tape, Var x);
  void collect(const std::string& prefix, std::vector<StateEntry>& out);
};

/// Path A: separable conv, BN, ReLU, strided separable conv, BN.
/// Path B: strided 1x1 conv, BN. Output: ReLU(A + B).
struct ResidualBlock {
  ResidualBlockSpec spec;
  SeparableConvLayer a1, a2;
  BatchNormLayer bn_a1, bn_a2;
  PointwiseConvLayer shortcut;
  BatchNormLayer bn_b;

  ResidualBlock(const std::string& name, std::size_t c_in, const ResidualBlockSpec& spec, Rng& rng);
  Var forward(Tape& tape, Var x, NormMode mode);
  void collect(const std::string& prefix, std::vector<StateEntry>& out);
};

// --- extractors ---------------------------------------------------------------

/// Anything that maps a set of transformed inputs [B, ...] to features [B, F].
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  /// Frozen extractors always run batch norm in inference mode.
  virtual Var forward(Tape& tape, const Inputs& inputs, NormMode mode) = 0;
  virtual std::size_t feature_length() const = 0;
  virtual std::set<TransformKind> input_kinds() const = 0;
  virtual json architecture() const = 0;
  virtual void collect(const std::string& prefix, std::vector<StateEntry>& out) = 0;

  std::vector<StateEntry> state(const std::string& prefix = "");
  std::vector<Parameter*> parameters();
  /// Marks every parameter non-trainable. There is no way back.
  void freeze();
  bool frozen();
};

class CnnBase final : public FeatureExtractor {
 public:
  CnnBase(TransformKind kind, CnnBaseSpec spec, Rng& rng);

  Var forward(Tape& tape, const Inputs& inputs, NormMode mode) override;
  /// Forward on the trunk's own input tensor.
  Var forward(Tape& tape, Var x, NormMode mode);
  std::size_t feature_length() const override { return spec_.feature_length(); }
  std::set<TransformKind> input_kinds() const override { return {kind_}; }
  json architecture() const override;
  void collect(const std::string& prefix, std::vector<StateEntry>& out) override;

  TransformKind kind() const { return kind_; }
  const CnnBaseSpec& spec() const { return spec_; }

 private:
  TransformKind kind_;
  CnnBaseSpec spec_;
  std::vector<ResidualBlock> blocks_;
};

/// Frozen sources, each followed by a trainable dense + ReLU weighting layer,
/// concatenated along the feature axis.
class MergedExtractor final : public FeatureExtractor {
 public:
  struct Branch {
    std::unique_ptr<FeatureExtractor> source;
    DenseLayer dense;
  };

  explicit MergedExtractor(std::vector<Branch> branches);

  Var forward(Tape& tape, const Inputs& inputs, NormMode mode) override;
  /// Same computation given precomputed source features, one per branch.
  Var forward_from_features(Tape& tape, std::span<const Var> source_features);
  std::size_t feature_length() const override;
  std::set<TransformKind> input_kinds() const override;
  json architecture() const override;
  void collect(const std::string& prefix, std::vector<StateEntry>& out) override;

  std::vector<Branch>& branches() { return branches_; }
  const std::vector<Branch>& branches() const { return branches_; }

 private:
  std::vector<Branch> branches_;
};

class Classifier {
 public:
  Classifier(const ClassifierSpec& spec, std::size_t in, Rng& rng);
  /// Dense layers with ReLU between them, softmax at the end.
  Var forward(Tape& tape, Var features);
  ClassifierSpec spec() const;
  std::vector<DenseLayer>& layers() { return layers_; }
  void collect(const std::string& prefix, std::vector<StateEntry>& out);

 private:
  std::vector<DenseLayer> layers_;
};

/// Feature extractor plus an optional classifier head.
class Network {
 public:
  Network(std::unique_ptr<FeatureExtractor> extractor, std::optional<Classifier> classifier);

  /// Class probabilities [B, C]; requires a classifier.
  Var forward(Tape& tape, const Inputs& inputs, NormMode mode);
  Var features(Tape& tape, const Inputs& inputs, NormMode mode);

  FeatureExtractor& extractor();
  bool has_classifier() const { return classifier_.has_value(); }
  Classifier& classifier();
  std::vector<StateEntry> state();
  std::vector<Parameter*> parameters();
  json architecture() const;

  std::unique_ptr<FeatureExtractor> release_extractor();
  void drop_classifier() { classifier_.reset(); }

 private:
  std::unique_ptr<FeatureExtractor> extractor_;
  std::optional<Classifier> classifier_;
};

// --- construction -------------------------------------------------------------

std::unique_ptr<CnnBase> build_base(TransformKind kind, const CnnBaseSpec& spec, Rng& rng);
Network attach_classifier(std::unique_ptr<FeatureExtractor> base, const ClassifierSpec& spec, Rng& rng);
/// Returns the extractor with its parameters untouched. A network that has
/// already been stripped throws std::logic_error.
std::unique_ptr<FeatureExtractor> strip_classifier(Network& network);
FeatureExtractor& freeze_base(FeatureExtractor& base);

using BranchWidthTable = std::map<TransformKind, std::size_t>;

/// Branch widths proportional to each transform's score, rounded to multiples
/// of 16 (at least 16), with `total` as the overall budget before rounding.
BranchWidthTable allocate_branch_widths(const std::map<TransformKind, double>& scores, std::size_t total = 240);
/// The same rule for a sequential merge: {previous merged branch, new base}.
std::pair<std::size_t, std::size_t> allocate_pair_widths(double score_prev, double score_new, std::size_t total = 256);

/// One branch per frozen CnnBase, width looked up by the base's transform.
Network merge_combined(std::vector<std::unique_ptr<FeatureExtractor>> bases, const BranchWidthTable& widths,
                       const ClassifierSpec& classifier, Rng& rng);
/// Two branches: the frozen previous merged extractor and a frozen new base.
Network merge_pair(std::unique_ptr<FeatureExtractor> merged_prev, std::unique_ptr<FeatureExtractor> new_base,
                   std::size_t width_prev, std::size_t width_new, const ClassifierSpec& classifier, Rng& rng);

struct ParamCensus {
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;  ///< frozen parameters plus running statistics
  std::size_t total() const { return trainable + non_trainable; }
};
ParamCensus census(const std::vector<StateEntry>& state);

/// Rebuilds an extractor from its architecture() description with fresh weights.
std::unique_ptr<FeatureExtractor> extractor_from_architecture(const json& arch);

}  // namespace mstage
