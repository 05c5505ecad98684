#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "mstage/window.hpp"

namespace mstage {

using Rng = std::mt19937_64;

struct AugmentationConfig {
  /// Absolute jitter std in sensor units; unset means 0.05 x per-channel std.
  std::optional<double> jitter_std;
  double scale_std = 0.1;
  std::size_t n_segments = 4;
  double magwarp_std = 0.2;
  std::size_t magwarp_knots = 4;
  double timewarp_std = 0.2;
  std::size_t timewarp_knots = 4;
  std::uint64_t seed = 0;

  /// Parameters under which compose_all_five returns its input unchanged.
  static AugmentationConfig neutral();
  void validate() const;
};

/// Natural cubic spline through (x[i], y[i]), x strictly increasing.
class CubicSpline {
 public:
  CubicSpline(std::vector<double> x, std::vector<double> y);
  double operator()(double t) const;

 private:
  std::vector<double> x_, y_, m_;  // m_ = second derivatives at the knots
};

/// Knot positions spread evenly over [0, length - 1].
std::vector<double> knot_positions(std::size_t length, std::size_t knots);
/// Spline through `values` at knot_positions, sampled at 0..length-1.
std::vector<double> smooth_curve(std::size_t length, std::span<const double> values);
/// Sample positions read by time_warp for the given per-knot speeds; starts at 0,
/// ends at length - 1, strictly increasing.
std::vector<double> time_warp_map(std::size_t length, std::span<const double> speeds);

TimeSeriesWindow jitter(const TimeSeriesWindow& w, double std, Rng& rng);
TimeSeriesWindow scale(const TimeSeriesWindow& w, double scale_std, Rng& rng);
TimeSeriesWindow permute_segments(const TimeSeriesWindow& w, std::size_t n_segments, Rng& rng);
TimeSeriesWindow magnitude_warp(const TimeSeriesWindow& w, double std, std::size_t knots, Rng& rng);
TimeSeriesWindow time_warp(const TimeSeriesWindow& w, double std, std::size_t knots, Rng& rng);

/// jitter, scale, permute, magnitude warp, time warp, in that order, sharing one stream.
TimeSeriesWindow compose_all_five(const TimeSeriesWindow& w, const AugmentationConfig& cfg, Rng& rng);

/// Segment boundaries used by permute_segments: n + 1 offsets, sizes differ by at most one.
std::vector<std::size_t> segment_bounds(std::size_t length, std::size_t n_segments);

/// Appends augmented copies of minority-class windows until every class has as
/// many samples as the largest one. Sources are cycled in input order; copy i is
/// drawn from seed ^ i. With `num_classes`, a class with no samples is an error.
std::vector<TimeSeriesWindow> balance_dataset(const std::vector<TimeSeriesWindow>& samples,
                                              const AugmentationConfig& cfg,
                                              std::optional<int> num_classes = std::nullopt);

/// `copies` augmented variants per window (ids `<source>~copy<i>`), appended after the originals.
std::vector<TimeSeriesWindow> expand_dataset(const std::vector<TimeSeriesWindow>& samples,
                                             const AugmentationConfig& cfg, std::size_t copies);

}  // namespace mstage
