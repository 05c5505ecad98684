#include "mstage/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mstage {

namespace {

// Fan-in scaled uniform: variance 1 / fan_in.
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(3.0 / double(fan_in));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

std::size_t out_extent(std::size_t len, std::size_t kernel, std::size_t stride, Padding p) {
  if (p == Padding::same) return (len + stride - 1) / stride;
  return len < kernel ? 0 : (len - kernel) / stride + 1;
}

const char* dim_name(Dim d) { return d == Dim::d1 ? "1d" : "2d"; }

Dim parse_dim(const std::string& s, const std::string& path) {
  if (s == "1d") return Dim::d1;
  if (s == "2d") return Dim::d2;
  throw ConfigError(path, "expected 1d or 2d, got '" + s + "'");
}

void require_frozen(FeatureExtractor& e, const char* op) {
  if (!e.frozen()) throw std::invalid_argument(std::string(op) + ": branch source must be frozen");
}

}  // namespace

// --- specs --------------------------------------------------------------------

void CnnBaseSpec::validate() const {
  const std::size_t spatial = dim == Dim::d1 ? 1 : 2;
  if (input_shape.size() != spatial + 1)
    throw DimensionError("build_base", "input shape " + shape_to_string(input_shape) + " does not match a " +
                                           dim_name(dim) + " trunk");
  if (blocks.empty()) throw DimensionError("build_base", "no residual blocks");
  std::vector<std::size_t> extent(input_shape.begin() + 1, input_shape.end());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string where = "block " + std::to_string(i);
    if (b.dim != dim) throw DimensionError("build_base", where + ": dimensionality differs from the trunk");
    if (b.kernel < 1 || b.filters < 1 || b.stride < 1)
      throw DimensionError("build_base", where + ": kernel, filters and stride must be >= 1");
    if (!(b.bn_momentum >= 0.0 && b.bn_momentum < 1.0))
      throw std::invalid_argument("build_base: " + where + ": bn_momentum must be in [0, 1)");
    for (std::size_t a = 0; a < extent.size(); ++a) {
      const std::size_t first = out_extent(extent[a], b.kernel, 1, b.padding);
      const std::size_t path_a = first == 0 ? 0 : out_extent(first, b.kernel, b.stride, b.padding);
      const std::size_t path_b = out_extent(extent[a], 1, b.stride, Padding::valid);
      if (path_a == 0)
        throw DimensionError("build_base", where + ": kernel " + std::to_string(b.kernel) + " does not fit extent " +
                                               std::to_string(extent[a]));
      if (path_a != path_b)
        throw DimensionError("build_base", where + ": residual paths disagree on axis " + std::to_string(a + 2) +
                                               " (" + std::to_string(path_a) + " vs " + std::to_string(path_b) + ")");
      extent[a] = path_a;
    }
  }
}

json CnnBaseSpec::to_json() const {
  json blocks_json = json::array();
  for (const auto& b : blocks)
    blocks_json.push_back({{"kernel", b.kernel},
                           {"filters", b.filters},
                           {"stride", b.stride},
                           {"padding", b.padding == Padding::same ? "same" : "valid"},
                           {"bn_momentum", b.bn_momentum}});
  return {{"dim", dim_name(dim)}, {"input_shape", input_shape}, {"blocks", blocks_json}};
}

CnnBaseSpec CnnBaseSpec::from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"dim", "input_shape", "blocks"}, path);
  CnnBaseSpec s;
  std::string dim = "1d";
  read_key(j, "dim", dim, path);
  s.dim = parse_dim(dim, key_path(path, "dim"));
  read_key(j, "input_shape", s.input_shape, path);
  if (j.contains("blocks")) {
    std::size_t i = 0;
    for (const auto& bj : j.at("blocks")) {
      const std::string bp = key_path(path, "blocks[" + std::to_string(i++) + "]");
      reject_unknown_keys(bj, {"kernel", "filters", "stride", "padding", "bn_momentum"}, bp);
      ResidualBlockSpec b;
      b.dim = s.dim;
      read_key(bj, "kernel", b.kernel, bp);
      read_key(bj, "filters", b.filters, bp);
      read_key(bj, "stride", b.stride, bp);
      read_key(bj, "bn_momentum", b.bn_momentum, bp);
      std::string pad = "same";
      read_key(bj, "padding", pad, bp);
      if (pad != "same" && pad != "valid") throw ConfigError(key_path(bp, "padding"), "expected same or valid");
      b.padding = pad == "same" ? Padding::same : Padding::valid;
      s.blocks.push_back(b);
    }
  }
  return s;
}

void ClassifierSpec::validate() const {
  if (widths.empty()) throw std::invalid_argument("classifier: no layers");
  for (auto w : widths)
    if (w == 0) throw std::invalid_argument("classifier: zero-width layer");
  if (classes() < 2) throw std::invalid_argument("classifier: need at least 2 classes");
}

void ModelConfig::validate(const std::string& path) const {
  auto positive = [&](const std::vector<std::size_t>& v, const char* key) {
    if (v.empty()) throw ConfigError(key_path(path, key), "must not be empty");
    for (auto x : v)
      if (x == 0) throw ConfigError(key_path(path, key), "entries must be positive");
  };
  positive(filters_1d, "filters_1d");
  positive(filters_2d, "filters_2d");
  if (kernel_1d == 0) throw ConfigError(key_path(path, "kernel_1d"), "must be positive");
  if (kernel_2d == 0) throw ConfigError(key_path(path, "kernel_2d"), "must be positive");
  if (stride == 0) throw ConfigError(key_path(path, "stride"), "must be positive");
  for (auto x : classifier_hidden)
    if (x == 0) throw ConfigError(key_path(path, "classifier_hidden"), "entries must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError(key_path(path, "bn_momentum"), "must be in [0, 1)");
}

json ModelConfig::to_json() const {
  return {{"filters_1d", filters_1d}, {"kernel_1d", kernel_1d},   {"filters_2d", filters_2d},
          {"kernel_2d", kernel_2d},   {"stride", stride},         {"classifier_hidden", classifier_hidden},
          {"bn_momentum", bn_momentum}};
}

ModelConfig ModelConfig::from_json(const json& j, const std::string& path) {
  reject_unknown_keys(
      j, {"filters_1d", "kernel_1d", "filters_2d", "kernel_2d", "stride", "classifier_hidden", "bn_momentum"}, path);
  ModelConfig c;
  read_key(j, "filters_1d", c.filters_1d, path);
  read_key(j, "kernel_1d", c.kernel_1d, path);
  read_key(j, "filters_2d", c.filters_2d, path);
  read_key(j, "kernel_2d", c.kernel_2d, path);
  read_key(j, "stride", c.stride, path);
  read_key(j, "classifier_hidden", c.classifier_hidden, path);
  read_key(j, "bn_momentum", c.bn_momentum, path);
  c.validate(path);
  return c;
}

CnnBaseSpec default_base_spec(TransformKind kind, const Shape& input_shape, const ModelConfig& cfg) {
  CnnBaseSpec s;
  s.dim = is_image_transform(kind) ? Dim::d2 : Dim::d1;
  s.input_shape = input_shape;
  const auto& filters = s.dim == Dim::d1 ? cfg.filters_1d : cfg.filters_2d;
  const std::size_t kernel = s.dim == Dim::d1 ? cfg.kernel_1d : cfg.kernel_2d;
  for (auto f : filters) s.blocks.push_back({kernel, f, cfg.stride, s.dim, Padding::same, cfg.bn_momentum});
  return s;
}

ClassifierSpec default_classifier(std::size_t classes, const ModelConfig& cfg) {
  ClassifierSpec s{cfg.classifier_hidden};
  s.widths.push_back(classes);
  return s;
}

// --- layers -------------------------------------------------------------------

DenseLayer::DenseLayer(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : w(name + ".w", init_uniform({in, out}, in, rng)), b(name + ".b", Tensor({out})) {}

Var DenseLayer::forward(Tape& tape, Var x) { return dense(x, tape.param(w), tape.param(b)); }

void DenseLayer::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "w", &w.value, &w});
  out.push_back({prefix + "b", &b.value, &b});
}

BatchNormLayer::BatchNormLayer(const std::string& name, std::size_t channels, double momentum_)
    : gamma(name + ".gamma", Tensor({channels}, 1.0)),
      beta(name + ".beta", Tensor({channels})),
      stats{Tensor({channels}), Tensor({channels}, 1.0)},
      momentum(momentum_) {}

Var BatchNormLayer::forward(Tape& tape, Var x, NormMode mode) {
  return batch_norm(x, tape.param(gamma), tape.param(beta), stats, mode, momentum);
}

void BatchNormLayer::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "gamma", &gamma.value, &gamma});
  out.push_back({prefix + "beta", &beta.value, &beta});
  out.push_back({prefix + "running_mean", &stats.mean, nullptr});
  out.push_back({prefix + "running_var", &stats.var, nullptr});
}

SeparableConvLayer::SeparableConvLayer(const std::string& name, Dim dim_, std::size_t c_in, std::size_t filters,
                                       std::size_t kernel, std::size_t stride_, Padding padding_, Rng& rng)
    : dim(dim_), stride(stride_), padding(padding_) {
  const std::size_t taps = dim == Dim::d1 ? kernel : kernel * kernel;
  Shape dw = dim == Dim::d1 ? Shape{c_in, kernel} : Shape{c_in, kernel, kernel};
  Shape pw = dim == Dim::d1 ? Shape{filters, c_in, 1} : Shape{filters, c_in, 1, 1};
  depthwise = Parameter(name + ".depthwise", init_uniform(dw, taps, rng));
  pointwise = Parameter(name + ".pointwise", init_uniform(pw, c_in, rng));
  bias = Parameter(name + ".bias", Tensor({filters}));
}

Var SeparableConvLayer::forward(Tape& tape, Var x) {
  auto dw = tape.param(depthwise), pw = tape.param(pointwise), b = tape.param(bias);
  return dim == Dim::d1 ? separable_conv1d(x, dw, pw, b, stride, padding)
                        : separable_conv2d(x, dw, pw, b, stride, padding);
}

void SeparableConvLayer::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "depthwise", &depthwise.value, &depthwise});
  out.push_back({prefix + "pointwise", &pointwise.value, &pointwise});
  out.push_back({prefix + "bias", &bias.value, &bias});
}

PointwiseConvLayer::PointwiseConvLayer(const std::string& name, Dim dim_, std::size_t c_in, std::size_t filters,
                                       std::size_t stride_, Rng& rng)
    : dim(dim_), stride(stride_) {
  Shape ws = dim == Dim::d1 ? Shape{filters, c_in, 1} : Shape{filters, c_in, 1, 1};
  w = Parameter(name + ".w", init_uniform(ws, c_in, rng));
  bias = Parameter(name + ".bias", Tensor({filters}));
}

Var PointwiseConvLayer::forward(Tape& tape, Var x) {
  auto wv = tape.param(w), b = tape.param(bias);
  return dim == Dim::d1 ? conv1d(x, wv, b, stride, Padding::valid) : conv2d(x, wv, b, stride, Padding::valid);
}

void PointwiseConvLayer::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  out.push_back({prefix + "w", &w.value, &w});
  out.push_back({prefix + "bias", &bias.value, &bias});
}

ResidualBlock::ResidualBlock(const std::string& name, std::size_t c_in, const ResidualBlockSpec& s, Rng& rng)
    : spec(s),
      a1(name + ".a1", s.dim, c_in, s.filters, s.kernel, 1, s.padding, rng),
      a2(name + ".a2", s.dim, s.filters, s.filters, s.kernel, s.stride, s.padding, rng),
      bn_a1(name + ".bn_a1", s.filters, s.bn_momentum),
      bn_a2(name + ".bn_a2", s.filters, s.bn_momentum),
      shortcut(name + ".shortcut", s.dim, c_in, s.filters, s.stride, rng),
      bn_b(name + ".bn_b", s.filters, s.bn_momentum) {}

Var ResidualBlock::forward(Tape& tape, Var x, NormMode mode) {
  Var a = relu(bn_a1.forward(tape, a1.forward(tape, x), mode));
  a = bn_a2.forward(tape, a2.forward(tape, a), mode);
  Var b = bn_b.forward(tape, shortcut.forward(tape, x), mode);
  return relu(residual_add(a, b));
}

void ResidualBlock::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  a1.collect(prefix + "a1.", out);
  bn_a1.collect(prefix + "bn_a1.", out);
  a2.collect(prefix + "a2.", out);
  bn_a2.collect(prefix + "bn_a2.", out);
  shortcut.collect(prefix + "shortcut.", out);
  bn_b.collect(prefix + "bn_b.", out);
}

// --- extractors ---------------------------------------------------------------

std::vector<StateEntry> FeatureExtractor::state(const std::string& prefix) {
  std::vector<StateEntry> out;
  collect(prefix, out);
  return out;
}

std::vector<Parameter*> FeatureExtractor::parameters() {
  std::vector<Parameter*> out;
  for (const auto& e : state())
    if (e.param) out.push_back(e.param);
  return out;
}

void FeatureExtractor::freeze() {
  for (auto* p : parameters()) p->trainable = false;
}

bool FeatureExtractor::frozen() {
  for (auto* p : parameters())
    if (p->trainable) return false;
  return true;
}

CnnBase::CnnBase(TransformKind kind, CnnBaseSpec spec, Rng& rng) : kind_(kind), spec_(std::move(spec)) {
  spec_.validate();
  std::size_t c_in = spec_.input_shape.front();
  blocks_.reserve(spec_.blocks.size());
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    blocks_.emplace_back("block" + std::to_string(i), c_in, spec_.blocks[i], rng);
    c_in = spec_.blocks[i].filters;
  }
}

Var CnnBase::forward(Tape& tape, const Inputs& inputs, NormMode mode) {
  auto it = inputs.find(kind_);
  if (it == inputs.end())
    throw std::invalid_argument("cnn base: no input for transform " + std::string(to_string(kind_)));
  return forward(tape, it->second, mode);
}

Var CnnBase::forward(Tape& tape, Var x, NormMode mode) {
  const auto& shape = x.shape();
  if (shape.size() != spec_.input_shape.size() + 1)
    throw DimensionError("cnn base", "expected batched input of rank " + std::to_string(spec_.input_shape.size() + 1) +
                                         ", got " + shape_to_string(shape));
  for (std::size_t a = 0; a < spec_.input_shape.size(); ++a)
    if (shape[a + 1] != spec_.input_shape[a])
      throw DimensionError("cnn base", int(a + 1), spec_.input_shape[a], shape[a + 1]);
  if (frozen()) mode = NormMode::infer;
  Var h = x;
  for (auto& b : blocks_) h = b.forward(tape, h, mode);
  return global_avg_pool(h);
}

json CnnBase::architecture() const {
  return {{"type", "cnn_base"}, {"transform", std::string(to_string(kind_))}, {"spec", spec_.to_json()}};
}

void CnnBase::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + "block" + std::to_string(i) + ".", out);
}

MergedExtractor::MergedExtractor(std::vector<Branch> branches) : branches_(std::move(branches)) {
  if (branches_.empty()) throw std::invalid_argument("merged extractor: no branches");
  for (std::size_t i = 0; i < branches_.size(); ++i)
    if (branches_[i].dense.in() != branches_[i].source->feature_length())
      throw DimensionError("merged extractor", "branch " + std::to_string(i) + " dense expects " +
                                                   std::to_string(branches_[i].dense.in()) + " features, source gives " +
                                                   std::to_string(branches_[i].source->feature_length()));
}

Var MergedExtractor::forward(Tape& tape, const Inputs& inputs, NormMode mode) {
  std::vector<Var> feats;
  feats.reserve(branches_.size());
  for (auto& b : branches_) feats.push_back(b.source->forward(tape, inputs, mode));
  return forward_from_features(tape, feats);
}

Var MergedExtractor::forward_from_features(Tape& tape, std::span<const Var> source_features) {
  if (source_features.size() != branches_.size())
    throw std::invalid_argument("merged extractor: expected " + std::to_string(branches_.size()) +
                                " feature tensors, got " + std::to_string(source_features.size()));
  std::vector<Var> parts;
  parts.reserve(branches_.size());
  for (std::size_t i = 0; i < branches_.size(); ++i)
    parts.push_back(relu(branches_[i].dense.forward(tape, source_features[i])));
  return concat(parts, 1);
}

std::size_t MergedExtractor::feature_length() const {
  std::size_t n = 0;
  for (const auto& b : branches_) n += b.dense.out();
  return n;
}

std::set<TransformKind> MergedExtractor::input_kinds() const {
  std::set<TransformKind> kinds;
  for (const auto& b : branches_) {
    auto k = b.source->input_kinds();
    kinds.insert(k.begin(), k.end());
  }
  return kinds;
}

json MergedExtractor::architecture() const {
  json branches = json::array();
  for (const auto& b : branches_) branches.push_back({{"source", b.source->architecture()}, {"width", b.dense.out()}});
  return {{"type", "merged"}, {"branches", branches}};
}

void MergedExtractor::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const std::string p = prefix + "branch" + std::to_string(i) + ".";
    branches_[i].source->collect(p + "source.", out);
    branches_[i].dense.collect(p + "dense.", out);
  }
}

Classifier::Classifier(const ClassifierSpec& spec, std::size_t in, Rng& rng) {
  spec.validate();
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    layers_.emplace_back("dense" + std::to_string(i), in, spec.widths[i], rng);
    in = spec.widths[i];
  }
}

Var Classifier::forward(Tape& tape, Var features) {
  Var h = features;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(tape, h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return softmax(h);
}

ClassifierSpec Classifier::spec() const {
  ClassifierSpec s;
  for (const auto& l : layers_) s.widths.push_back(l.out());
  return s;
}

void Classifier::collect(const std::string& prefix, std::vector<StateEntry>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + "dense" + std::to_string(i) + ".", out);
}

Network::Network(std::unique_ptr<FeatureExtractor> extractor, std::optional<Classifier> classifier)
    : extractor_(std::move(extractor)), classifier_(std::move(classifier)) {
  if (!extractor_) throw std::invalid_argument("network: null extractor");
  if (classifier_ && classifier_->layers().front().in() != extractor_->feature_length())
    throw DimensionError("network", "classifier expects " + std::to_string(classifier_->layers().front().in()) +
                                        " features, extractor gives " + std::to_string(extractor_->feature_length()));
}

FeatureExtractor& Network::extractor() {
  if (!extractor_) throw std::logic_error("network: extractor has been released");
  return *extractor_;
}

Classifier& Network::classifier() {
  if (!classifier_) throw std::logic_error("network: no classifier attached");
  return *classifier_;
}

Var Network::features(Tape& tape, const Inputs& inputs, NormMode mode) {
  return extractor().forward(tape, inputs, mode);
}

Var Network::forward(Tape& tape, const Inputs& inputs, NormMode mode) {
  return classifier().forward(tape, features(tape, inputs, mode));
}

std::vector<StateEntry> Network::state() {
  auto out = extractor().state("extractor.");
  if (classifier_) classifier_->collect("classifier.", out);
  return out;
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (const auto& e : state())
    if (e.param) out.push_back(e.param);
  return out;
}

json Network::architecture() const {
  json j{{"extractor", extractor_ ? extractor_->architecture() : json()}};
  j["classifier"] = classifier_ ? json(classifier_->spec().widths) : json();
  return j;
}

std::unique_ptr<FeatureExtractor> Network::release_extractor() {
  if (!extractor_) throw std::logic_error("network: extractor has already been released");
  classifier_.reset();
  return std::move(extractor_);
}

// --- construction -------------------------------------------------------------

std::unique_ptr<CnnBase> build_base(TransformKind kind, const CnnBaseSpec& spec, Rng& rng) {
  return std::make_unique<CnnBase>(kind, spec, rng);
}

Network attach_classifier(std::unique_ptr<FeatureExtractor> base, const ClassifierSpec& spec, Rng& rng) {
  if (!base) throw std::invalid_argument("attach_classifier: null base");
  Classifier head(spec, base->feature_length(), rng);
  return Network(std::move(base), std::move(head));
}

std::unique_ptr<FeatureExtractor> strip_classifier(Network& network) {
  if (!network.has_classifier()) throw std::logic_error("strip_classifier: network has no classifier to strip");
  return network.release_extractor();
}

FeatureExtractor& freeze_base(FeatureExtractor& base) {
  base.freeze();
  return base;
}

namespace {

std::vector<std::size_t> proportional_widths(const std::vector<double>& scores, std::size_t total) {
  if (scores.empty()) throw std::invalid_argument("branch widths: no scores");
  double sum = 0.0;
  for (double s : scores) {
    if (!(s >= 0.0)) throw std::invalid_argument("branch widths: negative score");
    sum += s;
  }
  std::vector<std::size_t> out;
  for (double s : scores) {
    const double share = sum > 0.0 ? s / sum : 1.0 / double(scores.size());
    const auto units = std::llround(share * double(total) / 16.0);
    out.push_back(std::size_t(std::max<long long>(units, 1)) * 16);
  }
  return out;
}

}  // namespace

BranchWidthTable allocate_branch_widths(const std::map<TransformKind, double>& scores, std::size_t total) {
  std::vector<double> values;
  for (const auto& [k, s] : scores) values.push_back(s);
  const auto widths = proportional_widths(values, total);
  BranchWidthTable t;
  std::size_t i = 0;
  for (const auto& [k, s] : scores) t[k] = widths[i++];
  return t;
}

std::pair<std::size_t, std::size_t> allocate_pair_widths(double score_prev, double score_new, std::size_t total) {
  const auto w = proportional_widths({score_prev, score_new}, total);
  return {w[0], w[1]};
}

Network merge_combined(std::vector<std::unique_ptr<FeatureExtractor>> bases, const BranchWidthTable& widths,
                       const ClassifierSpec& classifier, Rng& rng) {
  if (bases.size() < 2) throw std::invalid_argument("merge_combined: need at least 2 bases");
  std::vector<MergedExtractor::Branch> branches;
  for (std::size_t i = 0; i < bases.size(); ++i) {
    auto* cnn = dynamic_cast<CnnBase*>(bases[i].get());
    if (!cnn) throw std::invalid_argument("merge_combined: branch " + std::to_string(i) + " is not a CNN base");
    require_frozen(*cnn, "merge_combined");
    auto it = widths.find(cnn->kind());
    if (it == widths.end())
      throw std::invalid_argument("merge_combined: no branch width for transform " +
                                  std::string(to_string(cnn->kind())));
    if (it->second == 0) throw std::invalid_argument("merge_combined: zero branch width");
    DenseLayer dense("branch" + std::to_string(i), cnn->feature_length(), it->second, rng);
    branches.push_back({std::move(bases[i]), std::move(dense)});
  }
  auto merged = std::make_unique<MergedExtractor>(std::move(branches));
  return attach_classifier(std::move(merged), classifier, rng);
}

Network merge_pair(std::unique_ptr<FeatureExtractor> merged_prev, std::unique_ptr<FeatureExtractor> new_base,
                   std::size_t width_prev, std::size_t width_new, const ClassifierSpec& classifier, Rng& rng) {
  if (!merged_prev || !new_base) throw std::invalid_argument("merge_pair: null extractor");
  require_frozen(*merged_prev, "merge_pair");
  require_frozen(*new_base, "merge_pair");
  if (width_prev == 0 || width_new == 0) throw std::invalid_argument("merge_pair: zero branch width");
  std::vector<MergedExtractor::Branch> branches;
  DenseLayer d0("branch0", merged_prev->feature_length(), width_prev, rng);
  DenseLayer d1("branch1", new_base->feature_length(), width_new, rng);
  branches.push_back({std::move(merged_prev), std::move(d0)});
  branches.push_back({std::move(new_base), std::move(d1)});
  auto merged = std::make_unique<MergedExtractor>(std::move(branches));
  return attach_classifier(std::move(merged), classifier, rng);
}

ParamCensus census(const std::vector<StateEntry>& state) {
  ParamCensus c;
  for (const auto& e : state) (e.trainable() ? c.trainable : c.non_trainable) += e.tensor->size();
  return c;
}

std::unique_ptr<FeatureExtractor> extractor_from_architecture(const json& arch) {
  Rng rng(0);
  const std::string type = arch.at("type").get<std::string>();
  if (type == "cnn_base") {
    auto kind = parse_transform_kind(arch.at("transform").get<std::string>());
    return build_base(kind, CnnBaseSpec::from_json(arch.at("spec")), rng);
  }
  if (type == "merged") {
    std::vector<MergedExtractor::Branch> branches;
    std::size_t i = 0;
    for (const auto& bj : arch.at("branches")) {
      auto source = extractor_from_architecture(bj.at("source"));
      DenseLayer dense("branch" + std::to_string(i++), source->feature_length(), bj.at("width").get<std::size_t>(), rng);
      branches.push_back({std::move(source), std::move(dense)});
    }
    return std::make_unique<MergedExtractor>(std::move(branches));
  }
  throw std::invalid_argument("unknown extractor type '" + type + "'");
}

}  // namespace mstage
