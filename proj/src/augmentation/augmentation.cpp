#include "mstage/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mstage {

namespace {

// Lower bound on the local sampling speed so the warp map stays strictly increasing.
constexpr double kMinWarpSpeed = 0.05;

void require_std(const char* op, double s) {
  if (!std::isfinite(s) || s < 0.0)
    throw std::invalid_argument(std::string(op) + ": std must be finite and >= 0, got " + std::to_string(s));
}

void require_knots(const char* op, std::size_t knots, std::size_t length) {
  if (knots < 2) throw std::invalid_argument(std::string(op) + ": need at least 2 knots");
  if (knots > length)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(knots) + " knots exceed window length " +
                                std::to_string(length));
}

std::vector<double> draw_normal(Rng& rng, std::size_t n, double mean, double std) {
  std::normal_distribution<double> dist(mean, std);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

TimeSeriesWindow jitter_per_channel(const TimeSeriesWindow& w, std::span<const double> stds, Rng& rng) {
  TimeSeriesWindow out = w;
  for (std::size_t c = 0; c < w.channels(); ++c) {
    if (stds[c] == 0.0) continue;
    std::normal_distribution<double> noise(0.0, stds[c]);
    for (double& v : out.channel(c)) v += noise(rng);
  }
  return out;
}

double channel_std(std::span<const double> x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  return std::sqrt(var / double(x.size()));
}

TimeSeriesWindow derived(const TimeSeriesWindow& src, const AugmentationConfig& cfg, std::uint64_t index,
                         const char* tag = "~aug") {
  Rng rng(cfg.seed ^ index);
  TimeSeriesWindow w = compose_all_five(src, cfg, rng);
  w.id = src.id + tag + std::to_string(index);
  w.provenance.source_id = src.provenance.source_id.empty() ? src.id : src.provenance.source_id;
  w.provenance.augmented = true;
  return w;
}

}  // namespace

AugmentationConfig AugmentationConfig::neutral() {
  AugmentationConfig c;
  c.jitter_std = 0.0;
  c.scale_std = 0.0;
  c.n_segments = 1;
  c.magwarp_std = 0.0;
  c.timewarp_std = 0.0;
  return c;
}

void AugmentationConfig::validate() const {
  if (jitter_std) require_std("jitter", *jitter_std);
  require_std("scale", scale_std);
  require_std("magnitude_warp", magwarp_std);
  require_std("time_warp", timewarp_std);
  if (n_segments < 1) throw std::invalid_argument("permute_segments: n_segments must be >= 1");
  if (magwarp_knots < 2 || timewarp_knots < 2) throw std::invalid_argument("warp knots must be >= 2");
}

CubicSpline::CubicSpline(std::vector<double> x, std::vector<double> y)
    : x_(std::move(x)), y_(std::move(y)), m_(x_.size(), 0.0) {
  const std::size_t n = x_.size();
  if (n < 2 || y_.size() != n) throw std::invalid_argument("spline: need >= 2 matching knots");
  for (std::size_t i = 1; i < n; ++i)
    if (!(x_[i] > x_[i - 1])) throw std::invalid_argument("spline: knots must be strictly increasing");
  if (n == 2) return;
  // Tridiagonal system for the interior second derivatives, natural ends.
  const std::size_t k = n - 2;
  std::vector<double> diag(k), upper(k), rhs(k);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double h0 = x_[i] - x_[i - 1], h1 = x_[i + 1] - x_[i];
    diag[i - 1] = 2.0 * (h0 + h1);
    upper[i - 1] = h1;
    rhs[i - 1] = 6.0 * ((y_[i + 1] - y_[i]) / h1 - (y_[i] - y_[i - 1]) / h0);
  }
  for (std::size_t i = 1; i < k; ++i) {
    const double lower = x_[i + 1] - x_[i];
    const double f = lower / diag[i - 1];
    diag[i] -= f * upper[i - 1];
    rhs[i] -= f * rhs[i - 1];
  }
  m_[k] = rhs[k - 1] / diag[k - 1];
  for (std::size_t i = k - 1; i-- > 0;) m_[i + 1] = (rhs[i] - upper[i] * m_[i + 2]) / diag[i];
}

double CubicSpline::operator()(double t) const {
  const std::size_t n = x_.size();
  std::size_t i = std::upper_bound(x_.begin(), x_.end(), t) - x_.begin();
  i = std::clamp<std::size_t>(i, 1, n - 1) - 1;
  const double h = x_[i + 1] - x_[i];
  const double a = (x_[i + 1] - t) / h, b = (t - x_[i]) / h;
  return a * y_[i] + b * y_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
}

std::vector<double> knot_positions(std::size_t length, std::size_t knots) {
  std::vector<double> x(knots);
  for (std::size_t i = 0; i < knots; ++i) x[i] = double(i) * double(length - 1) / double(knots - 1);
  return x;
}

std::vector<double> smooth_curve(std::size_t length, std::span<const double> values) {
  CubicSpline s(knot_positions(length, values.size()), {values.begin(), values.end()});
  std::vector<double> curve(length);
  for (std::size_t t = 0; t < length; ++t) curve[t] = s(double(t));
  return curve;
}

std::vector<double> time_warp_map(std::size_t length, std::span<const double> speeds) {
  const auto speed = smooth_curve(length, speeds);
  std::vector<double> pos(length, 0.0);
  for (std::size_t t = 1; t < length; ++t) pos[t] = pos[t - 1] + std::max(speed[t], kMinWarpSpeed);
  const double end = double(length - 1), s = end / pos[length - 1];
  for (auto& p : pos) p = std::min(p * s, end);
  pos[length - 1] = end;
  return pos;
}

std::vector<std::size_t> segment_bounds(std::size_t length, std::size_t n_segments) {
  std::vector<std::size_t> b(n_segments + 1);
  for (std::size_t i = 0; i <= n_segments; ++i) b[i] = i * length / n_segments;
  return b;
}

TimeSeriesWindow jitter(const TimeSeriesWindow& w, double std, Rng& rng) {
  require_std("jitter", std);
  std::vector<double> stds(w.channels(), std);
  return jitter_per_channel(w, stds, rng);
}

TimeSeriesWindow scale(const TimeSeriesWindow& w, double scale_std, Rng& rng) {
  require_std("scale", scale_std);
  TimeSeriesWindow out = w;
  if (scale_std == 0.0) return out;
  const auto factors = draw_normal(rng, w.channels(), 1.0, scale_std);
  for (std::size_t c = 0; c < w.channels(); ++c)
    for (double& v : out.channel(c)) v *= factors[c];
  return out;
}

TimeSeriesWindow permute_segments(const TimeSeriesWindow& w, std::size_t n_segments, Rng& rng) {
  if (n_segments < 1 || n_segments > w.length())
    throw std::invalid_argument("permute_segments: n_segments must be in [1, " + std::to_string(w.length()) +
                                "], got " + std::to_string(n_segments));
  TimeSeriesWindow out = w;
  if (n_segments == 1) return out;
  std::vector<std::size_t> order(n_segments);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto bounds = segment_bounds(w.length(), n_segments);
  for (std::size_t c = 0; c < w.channels(); ++c) {
    auto src = w.channel(c);
    auto dst = out.channel(c);
    std::size_t at = 0;
    for (std::size_t seg : order)
      for (std::size_t t = bounds[seg]; t < bounds[seg + 1]; ++t) dst[at++] = src[t];
  }
  return out;
}

TimeSeriesWindow magnitude_warp(const TimeSeriesWindow& w, double std, std::size_t knots, Rng& rng) {
  require_std("magnitude_warp", std);
  require_knots("magnitude_warp", knots, w.length());
  TimeSeriesWindow out = w;
  if (std == 0.0) return out;
  const auto drawn = draw_normal(rng, knots * w.channels(), 1.0, std);
  for (std::size_t c = 0; c < w.channels(); ++c) {
    const auto curve = smooth_curve(w.length(), std::span(drawn).subspan(c * knots, knots));
    auto dst = out.channel(c);
    for (std::size_t t = 0; t < dst.size(); ++t) dst[t] *= curve[t];
  }
  return out;
}

TimeSeriesWindow time_warp(const TimeSeriesWindow& w, double std, std::size_t knots, Rng& rng) {
  require_std("time_warp", std);
  require_knots("time_warp", knots, w.length());
  TimeSeriesWindow out = w;
  if (std == 0.0) return out;
  // One warp for all channels keeps the sensors aligned in time.
  const auto pos = time_warp_map(w.length(), draw_normal(rng, knots, 1.0, std));
  const std::size_t last = w.length() - 1;
  for (std::size_t c = 0; c < w.channels(); ++c) {
    auto src = w.channel(c);
    auto dst = out.channel(c);
    for (std::size_t t = 0; t <= last; ++t) {
      const std::size_t i = std::min(std::size_t(pos[t]), last);
      const double frac = pos[t] - double(i);
      dst[t] = i == last ? src[last] : src[i] + frac * (src[i + 1] - src[i]);
    }
  }
  return out;
}

TimeSeriesWindow compose_all_five(const TimeSeriesWindow& w, const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<double> stds(w.channels());
  for (std::size_t c = 0; c < w.channels(); ++c)
    stds[c] = cfg.jitter_std ? *cfg.jitter_std : 0.05 * channel_std(w.channel(c));
  auto out = jitter_per_channel(w, stds, rng);
  out = scale(out, cfg.scale_std, rng);
  out = permute_segments(out, cfg.n_segments, rng);
  out = magnitude_warp(out, cfg.magwarp_std, cfg.magwarp_knots, rng);
  return time_warp(out, cfg.timewarp_std, cfg.timewarp_knots, rng);
}

std::vector<TimeSeriesWindow> balance_dataset(const std::vector<TimeSeriesWindow>& samples,
                                              const AugmentationConfig& cfg, std::optional<int> num_classes) {
  cfg.validate();
  std::map<int, std::vector<const TimeSeriesWindow*>> by_class;
  for (const auto& s : samples) {
    if (!s.label) throw std::invalid_argument("balance_dataset: window " + s.id + " has no label");
    by_class[*s.label].push_back(&s);
  }
  if (num_classes)
    for (int k = 0; k < *num_classes; ++k)
      if (!by_class.count(k)) throw std::invalid_argument("balance_dataset: class " + std::to_string(k) + " is empty");
  if (by_class.empty()) throw std::invalid_argument("balance_dataset: no samples");

  std::size_t majority = 0;
  for (const auto& [k, members] : by_class) majority = std::max(majority, members.size());

  std::vector<TimeSeriesWindow> out = samples;
  std::uint64_t index = 0;
  for (const auto& [k, members] : by_class)
    for (std::size_t j = members.size(); j < majority; ++j)
      out.push_back(derived(*members[(j - members.size()) % members.size()], cfg, index++));
  return out;
}

std::vector<TimeSeriesWindow> expand_dataset(const std::vector<TimeSeriesWindow>& samples,
                                             const AugmentationConfig& cfg, std::size_t copies) {
  cfg.validate();
  std::vector<TimeSeriesWindow> out = samples;
  out.reserve(samples.size() * (copies + 1));
  std::uint64_t index = 0;
  for (const auto& s : samples)
    for (std::size_t c = 0; c < copies; ++c) out.push_back(derived(s, cfg, index++, "~copy"));
  return out;
}

}  // namespace mstage
