#include <cmath>
#include <cstring>

#include "doctest.h"
#include "mstage/training.hpp"

using namespace mstage;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.filters_1d = {8, 12};
  c.filters_2d = {4, 6};
  c.kernel_1d = 3;
  c.classifier_hidden = {10};
  return c;
}

StageSettings quick_settings(std::size_t epochs = 30) {
  StageSettings s;
  s.max_epochs = epochs;
  s.batch_size = 16;
  s.patience = 5;
  s.adam.lr = 3e-3;
  return s;
}

const TransformKind kKinds[] = {TransformKind::identity, TransformKind::gaf, TransformKind::recurrence};

TransformConfig small_images() {
  TransformConfig t;
  t.image_size = 16;
  return t;
}

FoldData tiny_fold(std::uint64_t seed = 5) {
  SynthSpec spec;
  spec.n_per_class = 24;
  spec.classes = 3;
  spec.channels = 2;
  spec.length = 64;
  spec.seed = seed;
  spec.noise_std = 0.2;
  auto windows = synth_generate(spec);
  auto [train, held] = stratified_holdout(windows, 0.25, seed);
  auto [validation, test] = stratified_holdout(held, 0.5, seed + 1);
  auto z = ZScore::fit(train);
  FoldData f;
  f.train = make_feature_set(z.apply(train), kKinds, small_images());
  f.validation = make_feature_set(z.apply(validation), kKinds, small_images());
  f.test = make_feature_set(z.apply(test), kKinds, small_images());
  f.classes = spec.classes;
  return f;
}

std::vector<std::unique_ptr<FeatureExtractor>> trained_bases(const FoldData& f, std::size_t epochs = 5) {
  std::vector<std::unique_ptr<FeatureExtractor>> out;
  std::uint64_t seed = 1;
  for (auto k : kKinds) {
    auto r = train_individual(k, f, tiny_config(), quick_settings(epochs), seed++);
    auto base = strip_classifier(r.network);
    base->freeze();
    out.push_back(std::move(base));
  }
  return out;
}

std::vector<double> flatten(const std::vector<StateEntry>& state) {
  std::vector<double> out;
  for (const auto& e : state) out.insert(out.end(), e.tensor->data().begin(), e.tensor->data().end());
  return out;
}

}  // namespace

TEST_CASE("adam first step moves by lr / (1 + eps) against the gradient sign") {
  Parameter p("p", Tensor({3}, std::vector<double>{0.5, -1.0, 2.0}));
  AdamConfig cfg;
  Adam opt({&p}, cfg);
  p.grad = Tensor({3}, std::vector<double>{1.0, -1.0, 0.0});
  opt.step();
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  const double d = cfg.lr / (1.0 + cfg.eps);
  CHECK(p.value[0] == doctest::Approx(0.5 - d).epsilon(1e-15));
  CHECK(p.value[1] == doctest::Approx(-1.0 + d).epsilon(1e-15));
  CHECK(p.value[2] == 2.0);
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam leaves frozen parameters alone and rejects missing gradients") {
  Parameter frozen("f", Tensor({2}, 1.0), false);
  Parameter live("l", Tensor({2}, 1.0));
  Adam opt({&frozen, &live});
  frozen.grad = Tensor({2}, 5.0);
  live.grad = Tensor({2}, 0.0);
  opt.step();
  CHECK(frozen.value[0] == 1.0);
  CHECK(live.value[0] == 1.0);

  live.grad = Tensor();
  CHECK_THROWS_AS(opt.step(), std::logic_error);
  CHECK_THROWS_AS(Adam({&live}, AdamConfig{0.0}), std::invalid_argument);
}

TEST_CASE("adam matches a hand-rolled scalar recurrence over several steps") {
  Parameter p("p", Tensor({1}, 0.0));
  AdamConfig cfg{0.01, 0.9, 0.99, 1e-7};
  Adam opt({&p}, cfg);
  double theta = 0.0, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -0.1, 0.7, 0.2};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    p.grad = Tensor({1}, g);
    opt.step();
    m = 0.9 * m + 0.1 * g;
    v = 0.99 * v + 0.01 * g * g;
    theta -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.99, t))) + 1e-7);
    CHECK(p.value[0] == doctest::Approx(theta).epsilon(1e-13));
  }
}

TEST_CASE("stage settings reject unknown keys with their path") {
  json j = {{"max_epochs", 5}, {"learning_rate", 0.1}};
  try {
    StageSettings::from_json(j, "training.individual");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key_path() == "training.individual.learning_rate");
  }
  auto s = StageSettings::from_json({{"batch_size", 8}, {"lr", 0.002}}, "t");
  CHECK(s.batch_size == 8);
  CHECK(s.adam.lr == 0.002);
  CHECK(s.max_epochs == 200);
  CHECK_THROWS_AS(StageSettings::from_json({{"batch_size", 1}}, "t"), ConfigError);
  CHECK(StageSettings::from_json(s.to_json(), "t").to_json() == s.to_json());
}

TEST_CASE("plans have N individual stages and one or N - 1 merge stages") {
  std::vector<TransformKind> order(std::begin(kAllTransforms), std::end(kAllTransforms));
  auto two = make_plan(Scheme::two_stage, order, order, {}, {}, 7);
  CHECK(two.stages.size() == 5);
  CHECK(two.stages.back().scope == StageScope::combined);
  auto seq = make_plan(Scheme::sequential, order, order, {}, {}, 7);
  REQUIRE(seq.stages.size() == 4 + 3);
  for (std::size_t i = 0; i < seq.stages.size(); ++i) CHECK(seq.stages[i].seed == (7u ^ i));
  CHECK(seq.stages[4].kinds.size() == 2);
  CHECK(seq.stages[6].kinds.size() == 4);
  CHECK(parse_scheme("two-stage") == Scheme::two_stage);
  CHECK_THROWS_AS(parse_scheme("three-stage"), std::invalid_argument);
}

TEST_CASE("feature sets stack per kind and keep augmentation flags") {
  SynthSpec spec;
  spec.n_per_class = 2;
  spec.classes = 2;
  spec.length = 32;
  auto w = synth_generate(spec);
  w[1].provenance.augmented = true;
  auto fs = make_feature_set(w, kKinds, small_images());
  CHECK(fs.size() == 4);
  CHECK(fs.augmented[1]);
  std::vector<std::size_t> idx{2, 0};
  auto t = fs.stack(TransformKind::gaf, idx);
  CHECK(t.shape() == Shape{2, 3, 16, 16});
  CHECK(std::memcmp(t.data().data(), fs.inputs[TransformKind::gaf][2].data().data(), 3 * 256 * sizeof(double)) == 0);
  CHECK_THROWS_AS(fs.stack(TransformKind::scattering, idx), std::invalid_argument);
}

TEST_CASE("a small separable problem is fitted") {
  auto f = tiny_fold();
  auto s = quick_settings(50);
  s.patience = 50;
  auto r = train_individual(TransformKind::identity, f, tiny_config(), s, 3);
  REQUIRE(!r.report.epochs.empty());
  double best_acc = 0.0;
  for (const auto& e : r.report.epochs) best_acc = std::max(best_acc, e.train_accuracy);
  CHECK(best_acc >= 0.95);
  CHECK(r.report.final_train_loss < r.report.initial_train_loss);
  CHECK(r.report.validation_iou > 0.5);
}

TEST_CASE("training replays bit-exactly from the seed") {
  auto f = tiny_fold();
  auto a = train_individual(TransformKind::gaf, f, tiny_config(), quick_settings(6), 11);
  auto b = train_individual(TransformKind::gaf, f, tiny_config(), quick_settings(6), 11);
  REQUIRE(a.report.epochs.size() == b.report.epochs.size());
  for (std::size_t i = 0; i < a.report.epochs.size(); ++i) {
    CHECK(a.report.epochs[i].train_loss == b.report.epochs[i].train_loss);
    CHECK(a.report.epochs[i].validation_loss == b.report.epochs[i].validation_loss);
  }
  CHECK(flatten(a.network.state()) == flatten(b.network.state()));
}

TEST_CASE("stop reason and best epoch are consistent") {
  auto f = tiny_fold();
  auto s = quick_settings(40);
  s.patience = 2;
  auto r = train_individual(TransformKind::identity, f, tiny_config(), s, 4);
  const auto& e = r.report.epochs;
  if (r.report.stop == StopReason::early_stop) {
    CHECK(e.size() == r.report.best_epoch + 1 + s.patience);
  } else {
    CHECK(e.size() == s.max_epochs);
  }
  for (std::size_t i = 0; i < e.size(); ++i) CHECK(e[i].validation_loss >= e[r.report.best_epoch].validation_loss);
  // The kept weights are the best epoch's, so the validation loss is reproduced.
  CHECK(dataset_loss(r.network, f.validation) == doctest::Approx(e[r.report.best_epoch].validation_loss).epsilon(1e-12));
}

TEST_CASE("combined training leaves the frozen bases byte-identical") {
  auto f = tiny_fold();
  auto bases = trained_bases(f);
  std::vector<std::vector<double>> before;
  for (auto& b : bases) before.push_back(flatten(b->state()));
  BranchWidthTable widths{{TransformKind::identity, 16}, {TransformKind::gaf, 32}, {TransformKind::recurrence, 16}};
  auto r = train_combined(std::move(bases), widths, f, {{10, f.classes}}, quick_settings(8), 21);
  REQUIRE(r.reports.size() == 1);
  auto& merged = dynamic_cast<MergedExtractor&>(r.network.extractor());
  REQUIRE(merged.branches().size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(flatten(merged.branches()[i].source->state()) == before[i]);
  CHECK(merged.feature_length() == 64);

  // Cached-feature training must agree with a full forward pass.
  auto preds = predict(r.network, f.test);
  CHECK(preds.size() == f.test.size());
  CHECK(evaluate(r.network, f.test, f.classes).accuracy >= 0.0);
}

TEST_CASE("sequential training runs N - 1 stages and nests the extractors") {
  auto f = tiny_fold();
  auto bases = trained_bases(f);
  std::vector<double> first = flatten(bases[0]->state());
  auto r = train_sequential(std::move(bases), {{32, 16}, {32, 16}}, f, {{10, f.classes}}, quick_settings(6), 9);
  CHECK(r.reports.size() == 2);
  for (const auto& rep : r.reports)
    CHECK((rep.stop == StopReason::early_stop || rep.stop == StopReason::epoch_cap));
  auto& outer = dynamic_cast<MergedExtractor&>(r.network.extractor());
  REQUIRE(outer.branches().size() == 2);
  auto* inner = dynamic_cast<MergedExtractor*>(outer.branches()[0].source.get());
  REQUIRE(inner != nullptr);
  CHECK(inner->frozen());
  CHECK(flatten(inner->branches()[0].source->state()) == first);
  CHECK(outer.input_kinds().size() == 3);
  CHECK(predict(r.network, f.validation).size() == f.validation.size());

  CHECK_THROWS_AS(train_sequential(trained_bases(f, 1), {{32, 16}}, f, {{10, f.classes}}, quick_settings(1), 9),
                  std::invalid_argument);
}

TEST_CASE("augmented validation samples are refused") {
  auto f = tiny_fold();
  f.validation.augmented[0] = true;
  CHECK_THROWS_AS(train_individual(TransformKind::identity, f, tiny_config(), quick_settings(1), 1), std::logic_error);
}

TEST_CASE("a non-finite loss raises a divergence error naming the epoch") {
  auto f = tiny_fold();
  auto s = quick_settings(5);
  s.adam.lr = 1e308;
  try {
    train_individual(TransformKind::identity, f, tiny_config(), s, 1);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() < 5);
    CHECK(std::string(e.what()).find("epoch " + std::to_string(e.epoch())) != std::string::npos);
  }
}
