#include "mstage/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mstage {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("confusion matrix: zero classes");
}

void ConfusionMatrix::add(std::size_t actual, std::size_t predicted, std::uint64_t n) {
  if (actual >= classes_ || predicted >= classes_)
    throw std::out_of_range("confusion matrix: class index outside 0.." + std::to_string(classes_ - 1));
  counts_[actual * classes_ + predicted] += n;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(std::size_t actual) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += at(actual, p);
  return s;
}

std::uint64_t ConfusionMatrix::column_sum(std::size_t predicted) const {
  std::uint64_t s = 0;
  for (std::size_t a = 0; a < classes_; ++a) s += at(a, predicted);
  return s;
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, std::size_t classes) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("confusion matrix: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(labels.size()) + " labels");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || predictions[i] < 0) throw std::out_of_range("confusion matrix: negative class index");
    cm.add(std::size_t(labels[i]), std::size_t(predictions[i]));
  }
  return cm;
}

double FoldMetrics::mean_iou() const {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : per_class) s += c.iou;
  return s / double(per_class.size());
}

FoldMetrics per_class_metrics(const ConfusionMatrix& cm) {
  auto ratio = [](std::uint64_t num, std::uint64_t den) { return den == 0 ? 0.0 : double(num) / double(den); };
  FoldMetrics m;
  std::uint64_t correct = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    ClassMetrics c;
    c.tp = cm.at(k, k);
    c.fp = cm.column_sum(k) - c.tp;
    c.fn = cm.row_sum(k) - c.tp;
    c.precision = ratio(c.tp, c.tp + c.fp);
    c.recall = ratio(c.tp, c.tp + c.fn);
    c.iou = ratio(c.tp, c.tp + c.fp + c.fn);
    correct += c.tp;
    m.per_class.push_back(c);
  }
  m.accuracy = ratio(correct, cm.total());
  return m;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  MeanStd r;
  for (double v : values) r.mean += v;
  r.mean /= double(values.size());
  double var = 0.0;
  for (double v : values) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / double(values.size()));
  return r;
}

std::string format_mean_std(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", 100.0 * m.mean, 100.0 * m.std);
  return buf;
}

AggregateReport aggregate_folds(std::span<const FoldMetrics> folds) {
  if (folds.empty()) throw std::invalid_argument("aggregate_folds: no folds");
  AggregateReport r;
  r.folds.assign(folds.begin(), folds.end());
  const std::size_t C = folds.front().per_class.size();
  std::vector<double> acc, miou;
  for (const auto& f : folds) {
    if (f.per_class.size() != C) throw std::invalid_argument("aggregate_folds: folds disagree on class count");
    acc.push_back(f.accuracy);
    miou.push_back(f.mean_iou());
  }
  for (std::size_t k = 0; k < C; ++k) {
    std::vector<double> p, rc, io;
    for (const auto& f : folds) {
      p.push_back(f.per_class[k].precision);
      rc.push_back(f.per_class[k].recall);
      io.push_back(f.per_class[k].iou);
    }
    r.precision.push_back(mean_std(p));
    r.recall.push_back(mean_std(rc));
    r.iou.push_back(mean_std(io));
  }
  r.accuracy = mean_std(acc);
  r.mean_iou = mean_std(miou);
  return r;
}

// --- Wilcoxon rank-sum -----------------------------------------------------------

namespace {

// Midranks of the pooled sample, doubled so they stay integral.
std::vector<long long> doubled_midranks(const std::vector<double>& pooled, std::vector<std::size_t>& tie_sizes) {
  const std::size_t N = pooled.size();
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return pooled[i] < pooled[j]; });
  std::vector<long long> rank2(N);
  for (std::size_t i = 0; i < N;) {
    std::size_t j = i;
    while (j + 1 < N && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    // Positions i..j share the midrank ((i + 1) + (j + 1)) / 2.
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = (long long)(i + j + 2);
    tie_sizes.push_back(j - i + 1);
    i = j + 1;
  }
  return rank2;
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

WilcoxonResult wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b, Alternative alternative,
                                 double alpha, WilcoxonMethod method) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wilcoxon: both samples must be nonempty");
  for (double v : a)
    if (!std::isfinite(v)) throw std::invalid_argument("wilcoxon: non-finite value");
  for (double v : b)
    if (!std::isfinite(v)) throw std::invalid_argument("wilcoxon: non-finite value");
  const std::size_t n = a.size(), m = b.size(), N = n + m;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<std::size_t> ties;
  const auto rank2 = doubled_midranks(pooled, ties);

  long long w2 = 0;
  for (std::size_t i = 0; i < n; ++i) w2 += rank2[i];
  const long long e2 = (long long)(n * (N + 1));  // twice the null mean

  WilcoxonResult r;
  r.statistic = double(w2) / 2.0;
  r.alpha = alpha;
  r.exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && n <= 12 && m <= 12);

  if (r.exact) {
    // counts[j][s]: subsets of size j with doubled rank sum s.
    const long long max_sum = std::accumulate(rank2.begin(), rank2.end(), 0LL);
    std::vector<std::vector<double>> counts(n + 1, std::vector<double>(std::size_t(max_sum) + 1, 0.0));
    counts[0][0] = 1.0;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = std::min(i + 1, n); j >= 1; --j)
        for (long long s = max_sum; s >= rank2[i]; --s) counts[j][std::size_t(s)] += counts[j - 1][std::size_t(s - rank2[i])];
    double total = 0.0, tail = 0.0;
    const long long observed = w2 - e2;
    for (long long s = 0; s <= max_sum; ++s) {
      const double c = counts[n][std::size_t(s)];
      if (c == 0.0) continue;
      total += c;
      const long long d = s - e2;
      const bool in_tail = alternative == Alternative::two_sided ? std::llabs(d) >= std::llabs(observed)
                           : alternative == Alternative::greater ? d >= observed
                                                                 : d <= observed;
      if (in_tail) tail += c;
    }
    r.p_value = tail / total;
    return r;
  }

  double tie_term = 0.0;
  for (auto t : ties) tie_term += double(t) * double(t) * double(t) - double(t);
  const double var = double(n) * double(m) / 12.0 * (double(N + 1) - tie_term / (double(N) * double(N - 1)));
  if (!(var > 0.0)) {
    r.p_value = 1.0;
    return r;
  }
  const double sd = std::sqrt(var), diff = double(w2 - e2) / 2.0;
  switch (alternative) {
    case Alternative::two_sided:
      r.p_value = std::min(1.0, 2.0 * normal_sf(std::max(std::abs(diff) - 0.5, 0.0) / sd));
      break;
    case Alternative::greater:
      r.p_value = normal_sf((diff - 0.5) / sd);
      break;
    case Alternative::less:
      r.p_value = normal_sf((-diff - 0.5) / sd);
      break;
  }
  return r;
}

// --- CSV --------------------------------------------------------------------------

std::string format_number(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_number(const std::string& text) {
  double v;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) throw std::invalid_argument("not a number: '" + text + "'");
  return v;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    for (const auto* s : {&r.dataset, &r.scheme, &r.class_name})
      if (s->find(',') != std::string::npos) throw std::invalid_argument("metrics csv: field contains a comma: " + *s);
    out << r.dataset << ',' << r.scheme << ',' << r.fold << ',' << r.class_name << ',' << format_number(r.precision)
        << ',' << format_number(r.recall) << ',' << format_number(r.iou) << ',' << format_number(r.accuracy) << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != kMetricsHeader)
    throw std::runtime_error(std::string("metrics csv: expected header ") + kMetricsHeader);
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 8) throw std::runtime_error("metrics csv line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      MetricsRow r{f[0], f[1], std::stoul(f[2]), f[3], parse_number(f[4]), parse_number(f[5]), parse_number(f[6]),
                   parse_number(f[7])};
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("metrics csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_stages_csv(std::ostream& out, std::span<const StageRow> rows) {
  out << "stage,mean_iou\n";
  for (const auto& r : rows) out << r.stage << ',' << format_number(r.mean_iou) << '\n';
}

std::vector<StageRow> read_stages_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != "stage,mean_iou")
    throw std::runtime_error("stages csv: expected header stage,mean_iou");
  std::vector<StageRow> rows;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 2) throw std::runtime_error("stages csv: expected 2 fields in '" + line + "'");
    rows.push_back({std::stoul(f[0]), parse_number(f[1])});
  }
  return rows;
}

}  // namespace mstage
