#include "mstage/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mstage {

// --- Adam -------------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg.lr > 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
      !(cfg.eps > 0.0))
    throw std::invalid_argument("adam: lr and eps must be positive, betas in [0, 1)");
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  for (auto* p : params_)
    if (p->trainable && p->grad.shape() != p->value.shape())
      throw std::logic_error("adam: parameter " + p->name + " has no gradient");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    auto theta = p.value.data();
    auto g = p.grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      theta[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

// --- feature sets -------------------------------------------------------------------

Tensor FeatureSet::stack(TransformKind kind, std::span<const std::size_t> index) const {
  auto it = inputs.find(kind);
  if (it == inputs.end()) throw std::invalid_argument("feature set: no inputs for " + std::string(to_string(kind)));
  if (index.empty()) throw std::invalid_argument("feature set: empty batch");
  const Shape& per = it->second.at(index.front()).shape();
  Shape shape{index.size()};
  shape.insert(shape.end(), per.begin(), per.end());
  std::vector<double> data;
  data.reserve(shape_size(shape));
  for (auto i : index) {
    const auto& t = it->second.at(i);
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

FeatureSet make_feature_set(const std::vector<TimeSeriesWindow>& windows, std::span<const TransformKind> kinds,
                            const TransformConfig& cfg) {
  FeatureSet s;
  for (auto k : kinds) s.inputs[k].reserve(windows.size());
  for (const auto& w : windows) {
    if (!w.label) throw std::invalid_argument("feature set: window " + w.id + " has no label");
    for (auto k : kinds) s.inputs[k].push_back(transform_window(w, k, cfg).tensor);
    s.labels.push_back(*w.label);
    s.ids.push_back(w.id);
    s.augmented.push_back(w.provenance.augmented);
  }
  return s;
}

// --- plans --------------------------------------------------------------------------

void StageSettings::validate(const std::string& path) const {
  if (max_epochs == 0) throw ConfigError(key_path(path, "max_epochs"), "must be positive");
  if (batch_size < 2) throw ConfigError(key_path(path, "batch_size"), "must be at least 2 for batch norm");
  if (patience == 0) throw ConfigError(key_path(path, "patience"), "must be positive");
  if (!(adam.lr > 0.0)) throw ConfigError(key_path(path, "lr"), "must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError(key_path(path, "beta1"), "must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError(key_path(path, "beta2"), "must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError(key_path(path, "eps"), "must be positive");
}

json StageSettings::to_json() const {
  return {{"max_epochs", max_epochs}, {"batch_size", batch_size}, {"patience", patience}, {"lr", adam.lr},
          {"beta1", adam.beta1},      {"beta2", adam.beta2},      {"eps", adam.eps}};
}

StageSettings StageSettings::from_json(const json& j, const std::string& path, StageSettings s) {
  reject_unknown_keys(j, {"max_epochs", "batch_size", "patience", "lr", "beta1", "beta2", "eps"}, path);
  read_key(j, "max_epochs", s.max_epochs, path);
  read_key(j, "batch_size", s.batch_size, path);
  read_key(j, "patience", s.patience, path);
  read_key(j, "lr", s.adam.lr, path);
  read_key(j, "beta1", s.adam.beta1, path);
  read_key(j, "beta2", s.adam.beta2, path);
  read_key(j, "eps", s.adam.eps, path);
  s.validate(path);
  return s;
}

StageSettings StageSettings::from_json(const json& j, const std::string& path) {
  return from_json(j, path, StageSettings{});
}

std::string_view to_string(Scheme s) { return s == Scheme::two_stage ? "two-stage" : "sequential"; }

Scheme parse_scheme(std::string_view s) {
  if (s == "two-stage") return Scheme::two_stage;
  if (s == "sequential") return Scheme::sequential;
  throw std::invalid_argument("unknown scheme '" + std::string(s) + "' (expected two-stage or sequential)");
}

std::string_view to_string(StopReason r) { return r == StopReason::early_stop ? "early_stop" : "epoch_cap"; }

StagePlan make_plan(Scheme scheme, std::span<const TransformKind> individual_order,
                    std::span<const TransformKind> merge_order, const StageSettings& individual,
                    const StageSettings& merged, std::uint64_t seed) {
  if (individual_order.size() < 2) throw std::invalid_argument("plan: need at least 2 transforms");
  StagePlan plan;
  auto add = [&](std::string name, StageScope scope, std::vector<TransformKind> kinds, const StageSettings& s) {
    const std::uint64_t index = plan.stages.size();
    plan.stages.push_back({std::move(name), scope, std::move(kinds), s, seed ^ index});
  };
  for (auto k : individual_order) add("individual-" + std::string(to_string(k)), StageScope::individual, {k}, individual);
  if (scheme == Scheme::two_stage) {
    add("combined", StageScope::combined, {merge_order.begin(), merge_order.end()}, merged);
  } else {
    for (std::size_t n = 1; n < merge_order.size(); ++n)
      add("sequential-" + std::to_string(n + 1), StageScope::sequential,
          {merge_order.begin(), merge_order.begin() + std::ptrdiff_t(n + 1)}, merged);
  }
  return plan;
}

DivergenceError::DivergenceError(std::size_t epoch, const std::string& stage)
    : std::runtime_error(stage + ": training loss is not finite at epoch " + std::to_string(epoch)), epoch_(epoch) {}

// --- the fitting loop ----------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

/// Produces class probabilities for a batch of sample indices of one split.
using BatchForward = std::function<Var(Tape&, std::span<const std::size_t>, NormMode)>;

struct Split {
  BatchForward forward;
  const std::vector<int>* labels;
  std::size_t size() const { return labels->size(); }
};

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + std::ptrdiff_t(i),
                         order.begin() + std::ptrdiff_t(std::min(order.size(), i + batch_size)));
  // Batch norm cannot train on a single sample; fold a lone tail into its predecessor.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

std::vector<int> labels_of(const std::vector<int>& all, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

struct SplitScore {
  double loss = 0.0, accuracy = 0.0;
  std::vector<int> predictions;
};

SplitScore score(const Split& split, std::size_t batch_size) {
  SplitScore s;
  const std::size_t n = split.size();
  if (n == 0) return s;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; i += batch_size) {
    std::span<const std::size_t> idx(order.data() + i, std::min(batch_size, n - i));
    Tape tape;
    Var probs = split.forward(tape, idx, NormMode::infer);
    const auto labels = labels_of(*split.labels, idx);
    s.loss += cross_entropy(probs, labels).value()[0] * double(idx.size());
    const auto& p = probs.value();
    const std::size_t C = p.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = p.data().subspan(b * C, C);
      const int pred = int(std::max_element(row.begin(), row.end()) - row.begin());
      s.predictions.push_back(pred);
      correct += pred == labels[b];
    }
  }
  s.loss /= double(n);
  s.accuracy = double(correct) / double(n);
  return s;
}

TrainReport fit(Network& net, const Split& train, const Split& validation, std::size_t classes,
                const StageSettings& settings, Rng& rng, const std::string& stage) {
  settings.validate(stage);
  if (train.size() < 2) throw std::invalid_argument(stage + ": need at least 2 training samples");
  const auto start = Clock::now();
  TrainReport report;
  Adam opt(net.parameters(), settings.adam);
  auto state = net.state();
  const bool monitor_validation = validation.size() > 0;

  report.initial_train_loss = score(train, 64).loss;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_state;
  std::size_t since_best = 0;
  report.stop = StopReason::epoch_cap;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < settings.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    std::size_t correct = 0;
    for (const auto& batch : make_batches(order, settings.batch_size)) {
      Tape tape;
      Var probs = train.forward(tape, batch, NormMode::train);
      const auto labels = labels_of(*train.labels, batch);
      Var loss = cross_entropy(probs, labels);
      const double l = loss.value()[0];
      if (!std::isfinite(l)) throw DivergenceError(epoch, stage);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      rec.train_loss += l * double(batch.size());
      const auto& p = probs.value();
      const std::size_t C = p.dim(1);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto row = p.data().subspan(b * C, C);
        correct += int(std::max_element(row.begin(), row.end()) - row.begin()) == labels[b];
      }
    }
    rec.train_loss /= double(train.size());
    rec.train_accuracy = double(correct) / double(train.size());
    if (monitor_validation) {
      const auto v = score(validation, 64);
      rec.validation_loss = v.loss;
      rec.validation_accuracy = v.accuracy;
    }
    report.epochs.push_back(rec);

    const double monitored = monitor_validation ? rec.validation_loss : rec.train_loss;
    if (monitored < best) {
      best = monitored;
      report.best_epoch = epoch;
      best_state.clear();
      for (const auto& e : state) best_state.push_back(*e.tensor);
      since_best = 0;
    } else if (++since_best >= settings.patience) {
      report.stop = StopReason::early_stop;
      break;
    }
  }
  for (std::size_t i = 0; i < state.size(); ++i) *state[i].tensor = best_state[i];

  report.final_train_loss = score(train, 64).loss;
  if (monitor_validation) {
    const auto v = score(validation, 64);
    report.validation_iou =
        per_class_metrics(confusion_matrix(v.predictions, *validation.labels, classes)).mean_iou();
  }
  report.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return report;
}

void require_original(const FeatureSet& s, const char* what) {
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.augmented[i]) throw std::logic_error(std::string(what) + " contains augmented sample " + s.ids[i]);
}

Inputs constants_for(Tape& tape, const FeatureSet& data, const std::set<TransformKind>& kinds,
                     std::span<const std::size_t> idx) {
  Inputs in;
  for (auto k : kinds) in[k] = tape.constant(data.stack(k, idx));
  return in;
}

Split network_split(Network& net, const FeatureSet& data) {
  auto kinds = net.extractor().input_kinds();
  return {[&net, &data, kinds](Tape& tape, std::span<const std::size_t> idx, NormMode mode) {
            return net.forward(tape, constants_for(tape, data, kinds, idx), mode);
          },
          &data.labels};
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t F = t.dim(1);
  std::vector<double> out;
  out.reserve(idx.size() * F);
  for (auto i : idx) out.insert(out.end(), t.data().begin() + std::ptrdiff_t(i * F),
                                t.data().begin() + std::ptrdiff_t((i + 1) * F));
  return Tensor({idx.size(), F}, std::move(out));
}

/// Frozen extractor output over a whole set, [n, F].
Tensor extract_features(FeatureExtractor& e, const FeatureSet& data, std::size_t batch_size = 64) {
  const std::size_t n = data.size();
  const auto kinds = e.input_kinds();
  std::vector<double> out;
  out.reserve(n * e.feature_length());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < n; i += batch_size) {
    std::span<const std::size_t> idx(order.data() + i, std::min(batch_size, n - i));
    Tape tape;
    Var f = e.forward(tape, constants_for(tape, data, kinds, idx), NormMode::infer);
    out.insert(out.end(), f.value().data().begin(), f.value().data().end());
  }
  return Tensor({n, e.feature_length()}, std::move(out));
}

/// Cached source features per branch for one split.
using BranchCache = std::vector<Tensor>;

Split cached_split(Network& net, const BranchCache& cache, const std::vector<int>& labels) {
  return {[&net, &cache](Tape& tape, std::span<const std::size_t> idx, NormMode) {
            auto& merged = dynamic_cast<MergedExtractor&>(net.extractor());
            std::vector<Var> feats;
            for (const auto& c : cache) feats.push_back(tape.constant(gather_rows(c, idx)));
            return net.classifier().forward(tape, merged.forward_from_features(tape, feats));
          },
          &labels};
}

/// Output of a merged extractor computed from its cached branch inputs.
Tensor merged_output(MergedExtractor& m, const BranchCache& cache) {
  Tape tape;
  std::vector<Var> feats;
  for (const auto& c : cache) feats.push_back(tape.constant(c));
  return m.forward_from_features(tape, feats).value();
}

}  // namespace

IndividualResult train_individual(TransformKind kind, const FoldData& fold, const ModelConfig& model,
                                  const StageSettings& settings, std::uint64_t seed) {
  require_original(fold.validation, "validation set");
  auto it = fold.train.inputs.find(kind);
  if (it == fold.train.inputs.end() || it->second.empty())
    throw std::invalid_argument("train_individual: no training inputs for " + std::string(to_string(kind)));
  Rng rng(seed);
  auto spec = default_base_spec(kind, it->second.front().shape(), model);
  Network net = attach_classifier(build_base(kind, spec, rng), default_classifier(fold.classes, model), rng);
  auto train = network_split(net, fold.train);
  auto val = network_split(net, fold.validation);
  auto report = fit(net, train, val, fold.classes, settings, rng, "individual-" + std::string(to_string(kind)));
  return {std::move(net), std::move(report)};
}

MergedResult train_combined(std::vector<std::unique_ptr<FeatureExtractor>> bases, const BranchWidthTable& widths,
                            const FoldData& fold, const ClassifierSpec& head, const StageSettings& settings,
                            std::uint64_t seed) {
  require_original(fold.validation, "validation set");
  BranchCache train_cache, val_cache;
  for (auto& b : bases) {
    if (!b || !b->frozen()) throw std::invalid_argument("train_combined: bases must be frozen");
    train_cache.push_back(extract_features(*b, fold.train));
    val_cache.push_back(extract_features(*b, fold.validation));
  }
  Rng rng(seed);
  Network net = merge_combined(std::move(bases), widths, head, rng);
  auto report = fit(net, cached_split(net, train_cache, fold.train.labels),
                    cached_split(net, val_cache, fold.validation.labels), fold.classes, settings, rng, "combined");
  MergedResult r{std::move(net), {}};
  r.reports.push_back(std::move(report));
  return r;
}

MergedResult train_sequential(std::vector<std::unique_ptr<FeatureExtractor>> bases,
                              const std::vector<std::pair<std::size_t, std::size_t>>& widths, const FoldData& fold,
                              const ClassifierSpec& head, const StageSettings& settings, std::uint64_t seed) {
  require_original(fold.validation, "validation set");
  if (bases.size() < 2) throw std::invalid_argument("train_sequential: need at least 2 bases");
  if (widths.size() != bases.size() - 1)
    throw std::invalid_argument("train_sequential: need " + std::to_string(bases.size() - 1) + " width pairs, got " +
                                std::to_string(widths.size()));
  std::vector<Tensor> base_train, base_val;
  for (auto& b : bases) {
    if (!b || !b->frozen()) throw std::invalid_argument("train_sequential: bases must be frozen");
    base_train.push_back(extract_features(*b, fold.train));
    base_val.push_back(extract_features(*b, fold.validation));
  }

  std::unique_ptr<FeatureExtractor> prev = std::move(bases[0]);
  Tensor prev_train = base_train[0], prev_val = base_val[0];
  std::vector<TrainReport> reports;
  for (std::size_t n = 1; n < bases.size(); ++n) {
    Rng rng(seed ^ n);
    Network net = merge_pair(std::move(prev), std::move(bases[n]), widths[n - 1].first, widths[n - 1].second, head, rng);
    const BranchCache train_cache{prev_train, base_train[n]}, val_cache{prev_val, base_val[n]};
    reports.push_back(fit(net, cached_split(net, train_cache, fold.train.labels),
                          cached_split(net, val_cache, fold.validation.labels), fold.classes, settings, rng,
                          "sequential-" + std::to_string(n + 1)));
    if (n + 1 == bases.size()) return {std::move(net), std::move(reports)};
    auto& merged = dynamic_cast<MergedExtractor&>(net.extractor());
    prev_train = merged_output(merged, train_cache);
    prev_val = merged_output(merged, val_cache);
    prev = strip_classifier(net);
    prev->freeze();
  }
  throw std::logic_error("train_sequential: unreachable");
}

std::vector<int> predict(Network& network, const FeatureSet& data, std::size_t batch_size) {
  return score(network_split(network, data), batch_size).predictions;
}

FoldMetrics evaluate(Network& network, const FeatureSet& data, std::size_t classes) {
  return per_class_metrics(confusion_matrix(predict(network, data), data.labels, classes));
}

double dataset_loss(Network& network, const FeatureSet& data, std::size_t batch_size) {
  return score(network_split(network, data), batch_size).loss;
}

}  // namespace mstage
