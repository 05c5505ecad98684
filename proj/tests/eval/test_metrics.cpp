#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mstage/metrics.hpp"
#include "support/oracles.hpp"
#include "support/uci_fixture.hpp"

using namespace mstage;
using namespace mstage::testing;

TEST_CASE("confusion matrix") {
  std::vector<int> y{0, 1, 2, 2, 1};
  auto cm = confusion_matrix(y, y, 3);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t p = 0; p < 3; ++p) CHECK(cm.at(a, p) == (a == p ? cm.row_sum(a) : 0));
  std::vector<int> zeros(5, 0);
  auto col = confusion_matrix(zeros, y, 3);
  CHECK(col.column_sum(0) == 5);
  CHECK(col.column_sum(1) + col.column_sum(2) == 0);
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{3}, std::vector<int>{0}, 3), std::out_of_range);

  auto perfect = per_class_metrics(cm);
  CHECK(perfect.accuracy == 1.0);
  for (const auto& c : perfect.per_class) {
    CHECK(c.precision == 1.0);
    CHECK(c.recall == 1.0);
    CHECK(c.iou == 1.0);
  }
}

TEST_CASE("UCI two-stage fold counts") {
  auto [pred, label] = testing::uci_two_stage_lists();
  auto cm = confusion_matrix(pred, label, 6);
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t p = 0; p < 6; ++p) CHECK(cm.at(a, p) == testing::kUciTwoStageCounts[a][p]);
  auto m = per_class_metrics(cm);
  CHECK(m.per_class[0].tp == 466);
  CHECK(m.per_class[0].tp + m.per_class[0].fp == 473);
  CHECK(m.per_class[0].precision == 466.0 / 473.0);
  CHECK(m.per_class[5].iou == 1.0);
  CHECK(m.per_class[0].precision == doctest::Approx(0.9852).epsilon(1e-4));
}

TEST_CASE("metric identities against counting from pairs") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int C = 2 + trial % 6;
    std::uniform_int_distribution<int> cls(0, C - 1);
    std::vector<int> pred(1 + trial), label(1 + trial);
    for (auto& p : pred) p = cls(rng);
    for (auto& l : label) l = trial % 3 ? cls(rng) : 0;
    auto m = per_class_metrics(confusion_matrix(pred, label, C));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == label[i];
    CHECK(m.accuracy == double(correct) / double(pred.size()));
    for (int k = 0; k < C; ++k) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        tp += pred[i] == k && label[i] == k;
        fp += pred[i] == k && label[i] != k;
        fn += pred[i] != k && label[i] == k;
      }
      const auto& c = m.per_class[k];
      CHECK(c.precision == (tp + fp ? tp / (tp + fp) : 0.0));
      CHECK(c.recall == (tp + fn ? tp / (tp + fn) : 0.0));
      CHECK(c.iou == (tp + fp + fn ? tp / (tp + fp + fn) : 0.0));
      CHECK(c.iou <= std::min(c.precision, c.recall));
    }
  }
}

TEST_CASE("fold aggregation") {
  FoldMetrics a, b;
  a.accuracy = 0.98;
  b.accuracy = 1.00;
  a.per_class = b.per_class = {ClassMetrics{}, ClassMetrics{}};
  std::vector<FoldMetrics> folds{a, b};
  auto r = aggregate_folds(folds);
  CHECK(r.accuracy.mean == doctest::Approx(0.99).epsilon(1e-15));
  CHECK(r.accuracy.std == doctest::Approx(0.01).epsilon(1e-12));
  std::vector<FoldMetrics> same{a, a, a};
  CHECK(aggregate_folds(same).accuracy.std == 0.0);
  CHECK(format_mean_std({0.9929, 0.0013}) == "99.29±0.13");
  CHECK(format_mean_std({0.9863, 0.0029}) == "98.63±0.29");
}

TEST_CASE("wilcoxon rank-sum") {
  std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  auto r = wilcoxon_rank_sum(a, b);
  CHECK(r.exact);
  CHECK(r.statistic == 6.0);
  CHECK(r.p_value == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.alpha == 0.01);
  CHECK(wilcoxon_rank_sum(a, a).p_value == 1.0);
  CHECK_THROWS_AS(wilcoxon_rank_sum(a, std::vector<double>{}), std::invalid_argument);

  SUBCASE("exact method equals enumeration, ties included") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> val(0, 6);
    int mismatches = 0;
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t n = 1 + trial % 6, m = 1 + (trial / 6) % 6;
      std::vector<double> x(n), y(m);
      for (auto& v : x) v = val(rng);
      for (auto& v : y) v = val(rng);
      for (auto alt : {Alternative::two_sided, Alternative::less, Alternative::greater})
        if (std::abs(wilcoxon_rank_sum(x, y, alt).p_value - enumerate_p(x, y, alt)) > 1e-12) ++mismatches;
    }
    CHECK(mismatches == 0);
  }
  SUBCASE("normal approximation tracks the exact value at n = m = 12") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> x(12), y(12);
      for (auto& v : x) v = g(rng);
      for (auto& v : y) v = g(rng) + 0.5 * (trial % 3);
      auto e = wilcoxon_rank_sum(x, y, Alternative::two_sided, 0.01, WilcoxonMethod::exact);
      auto n = wilcoxon_rank_sum(x, y, Alternative::two_sided, 0.01, WilcoxonMethod::normal);
      CHECK(std::abs(e.p_value - n.p_value) < 0.02);
      CHECK(e.p_value > 0.0);
      CHECK(e.p_value <= 1.0);
    }
  }
  SUBCASE("large samples use the normal route") {
    std::vector<double> x(13), y(13);
    for (int i = 0; i < 13; ++i) {
      x[i] = i;
      y[i] = i + 20;
    }
    auto big = wilcoxon_rank_sum(x, y);
    CHECK_FALSE(big.exact);
    CHECK(big.significant());
  }
}

TEST_CASE("csv round trips") {
  std::vector<MetricsRow> rows{{"synth", "two-stage", 0, "class0", 1.0 / 3.0, 0.1, 2.0 / 7.0, 0.95},
                               {"synth", "two-stage", 1, "class1", 0.0, 1.0, 1e-300, 0.123456789012345678}};
  std::stringstream ss;
  write_metrics_csv(ss, rows);
  CHECK(ss.str().rfind("dataset,scheme,fold,class,precision,recall,iou,accuracy\n", 0) == 0);
  CHECK(read_metrics_csv(ss) == rows);

  std::vector<StageRow> stages{{1, 0.9}, {2, 0.9 + 1e-16}};
  std::stringstream st;
  write_stages_csv(st, stages);
  CHECK(read_stages_csv(st) == stages);
}
