#include "mstage/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mstage {

std::string_view to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::identity: return "identity";
    case TransformKind::scattering: return "scattering";
    case TransformKind::gaf: return "gaf";
    case TransformKind::recurrence: return "recurrence";
  }
  return "?";
}

TransformKind parse_transform_kind(std::string_view name) {
  for (auto k : kAllTransforms)
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown transform '" + std::string(name) +
                              "' (expected identity, scattering, gaf or recurrence)");
}

bool is_image_transform(TransformKind kind) {
  return kind == TransformKind::gaf || kind == TransformKind::recurrence;
}

std::vector<double> minmax_normalize(std::span<const double> x) {
  std::vector<double> out(x.size(), 0.0);
  if (x.empty()) return out;
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = std::clamp((2.0 * x[i] - *hi - *lo) / range, -1.0, 1.0);
  return out;
}

PolarEncoding polar_encode(std::span<const double> normalized, const GafConfig& cfg) {
  if (!(cfg.span_constant > 0.0)) throw std::invalid_argument("gaf: span constant must be positive");
  PolarEncoding p;
  p.angle.resize(normalized.size());
  p.radius.resize(normalized.size());
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    p.angle[i] = std::acos(std::clamp(normalized[i], -1.0, 1.0));
    p.radius[i] = double(i + 1) / cfg.span_constant;
  }
  return p;
}

Tensor gramian_angular_field(std::span<const double> normalized) {
  const std::size_t n = normalized.size();
  if (n == 0) throw std::invalid_argument("gaf: empty series");
  std::vector<double> phi(n);
  for (std::size_t i = 0; i < n; ++i) phi[i] = std::acos(std::clamp(normalized[i], -1.0, 1.0));
  Tensor g({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const double v = std::cos(phi[i] + phi[j]);
      g[i * n + j] = v;
      g[j * n + i] = v;
    }
  return g;
}

Tensor gaf_transform(std::span<const double> channel, const GafConfig& cfg) {
  const auto normalized = minmax_normalize(channel);
  (void)polar_encode(normalized, cfg);  // validates cfg; the radius does not enter G
  return gramian_angular_field(normalized);
}

Tensor recurrence_plot(std::span<const double> channel, const RecurrenceConfig& cfg) {
  if (cfg.embedding_dim < 1 || cfg.delay < 1)
    throw std::invalid_argument("recurrence: embedding dimension and delay must be >= 1");
  const std::size_t span = (cfg.embedding_dim - 1) * cfg.delay;
  if (span >= channel.size())
    throw std::invalid_argument("recurrence: embedding span " + std::to_string(span) +
                                " does not fit a window of " + std::to_string(channel.size()));
  double eps;
  if (cfg.threshold) {
    if (!(*cfg.threshold > 0.0)) throw std::invalid_argument("recurrence: threshold must be positive");
    eps = *cfg.threshold;
  } else {
    double mean = 0.0;
    for (double v : channel) mean += v;
    mean /= double(channel.size());
    double var = 0.0;
    for (double v : channel) var += (v - mean) * (v - mean);
    eps = cfg.threshold_std_fraction * std::sqrt(var / double(channel.size()));
  }

  const std::size_t k = channel.size() - span;
  Tensor r({k, k});
  for (std::size_t i = 0; i < k; ++i) {
    r[i * k + i] = 1.0;
    for (std::size_t j = i + 1; j < k; ++j) {
      double d2 = 0.0;
      for (std::size_t e = 0; e < cfg.embedding_dim; ++e) {
        const double d = channel[i + e * cfg.delay] - channel[j + e * cfg.delay];
        d2 += d * d;
      }
      const double v = std::sqrt(d2) <= eps ? 1.0 : 0.0;
      r[i * k + j] = v;
      r[j * k + i] = v;
    }
  }
  return r;
}

std::vector<double> identity_transform(std::span<const double> channel) {
  return {channel.begin(), channel.end()};
}

std::vector<double> piecewise_aggregate(std::span<const double> x, std::size_t size) {
  const std::size_t n = x.size();
  if (size == 0 || size >= n) return {x.begin(), x.end()};
  std::vector<double> out(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t b = i * n / size, e = (i + 1) * n / size;
    double s = 0.0;
    for (std::size_t t = b; t < e; ++t) s += x[t];
    out[i] = s / double(e - b);
  }
  return out;
}

Shape transformed_shape(TransformKind kind, std::size_t channels, std::size_t length,
                        const TransformConfig& cfg) {
  switch (kind) {
    case TransformKind::identity: return {channels, length};
    case TransformKind::scattering: {
      validate_scattering(length, cfg.scattering);
      return {channels, Scattering1D(length, cfg.scattering).output_size()};
    }
    case TransformKind::gaf:
    case TransformKind::recurrence: {
      std::size_t n = (cfg.image_size == 0 || cfg.image_size >= length) ? length : cfg.image_size;
      if (kind == TransformKind::recurrence)
        n -= (cfg.recurrence.embedding_dim - 1) * cfg.recurrence.delay;
      return {channels, n, n};
    }
  }
  throw std::logic_error("transformed_shape: unhandled kind");
}

const Scattering1D& cached_scattering(std::size_t length, const ScatteringConfig& cfg);

TransformedSample transform_window(const TimeSeriesWindow& window, TransformKind kind,
                                   const TransformConfig& cfg) {
  window.validate();
  const std::size_t channels = window.channels();
  TransformedSample out;
  out.kind = kind;
  out.window_id = window.id;

  std::vector<double> data;
  Shape shape;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto ch = window.channel(c);
    switch (kind) {
      case TransformKind::identity: {
        auto v = identity_transform(ch);
        data.insert(data.end(), v.begin(), v.end());
        shape = {channels, v.size()};
        break;
      }
      case TransformKind::scattering: {
        auto v = cached_scattering(ch.size(), cfg.scattering)(ch);
        shape = {channels, v.size()};
        data.insert(data.end(), v.begin(), v.end());
        break;
      }
      case TransformKind::gaf:
      case TransformKind::recurrence: {
        const auto reduced = piecewise_aggregate(ch, cfg.image_size);
        Tensor img = kind == TransformKind::gaf ? gaf_transform(reduced, cfg.gaf)
                                                : recurrence_plot(reduced, cfg.recurrence);
        shape = {channels, img.dim(0), img.dim(1)};
        data.insert(data.end(), img.data().begin(), img.data().end());
        break;
      }
    }
  }
  out.tensor = Tensor(std::move(shape), std::move(data));
  return out;
}

}  // namespace mstage
