#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mstage {

/// Rows are actual classes, columns predicted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t actual, std::size_t predicted) const { return counts_.at(actual * classes_ + predicted); }
  void add(std::size_t actual, std::size_t predicted, std::uint64_t n = 1);
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t actual) const;
  std::uint64_t column_sum(std::size_t predicted) const;
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, std::size_t classes);

struct ClassMetrics {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0;  ///< tp / (tp + fp), 0 when nothing was predicted
  double recall = 0.0;     ///< tp / (tp + fn), 0 when the class is absent
  double iou = 0.0;        ///< tp / (tp + fp + fn)
};

struct FoldMetrics {
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  /// Unweighted mean over classes.
  double mean_iou() const;
};

FoldMetrics per_class_metrics(const ConfusionMatrix& cm);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< population
};

MeanStd mean_std(std::span<const double> values);
/// Percentages with two decimals, e.g. "99.29±0.13".
std::string format_mean_std(const MeanStd& m);

struct AggregateReport {
  std::vector<FoldMetrics> folds;
  std::vector<MeanStd> precision, recall, iou;  ///< per class
  MeanStd accuracy;
  MeanStd mean_iou;
};

AggregateReport aggregate_folds(std::span<const FoldMetrics> folds);

enum class Alternative { two_sided, less, greater };
enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
  double statistic = 0.0;  ///< rank sum of the first sample, midranks for ties
  double p_value = 1.0;
  bool exact = false;
  double alpha = 0.01;
  bool significant() const { return p_value < alpha; }
};

/// Exact null distribution when both samples have at most 12 values, otherwise
/// a tie-corrected normal approximation with continuity correction.
WilcoxonResult wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b,
                                 Alternative alternative = Alternative::two_sided, double alpha = 0.01,
                                 WilcoxonMethod method = WilcoxonMethod::automatic);

/// One line of metrics.csv.
struct MetricsRow {
  std::string dataset;
  std::string scheme;
  std::size_t fold = 0;
  std::string class_name;
  double precision = 0.0, recall = 0.0, iou = 0.0, accuracy = 0.0;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline constexpr const char* kMetricsHeader = "dataset,scheme,fold,class,precision,recall,iou,accuracy";

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);

struct StageRow {
  std::size_t stage = 0;
  double mean_iou = 0.0;
  friend bool operator==(const StageRow&, const StageRow&) = default;
};

void write_stages_csv(std::ostream& out, std::span<const StageRow> rows);
std::vector<StageRow> read_stages_csv(std::istream& in);

/// Shortest text that parses back to the same double.
std::string format_number(double v);
double parse_number(const std::string& text);

}  // namespace mstage
