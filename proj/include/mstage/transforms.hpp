#pragma once

#include <complex>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mstage/tensor.hpp"
#include "mstage/window.hpp"

namespace mstage {

enum class TransformKind { identity, scattering, gaf, recurrence };

inline constexpr TransformKind kAllTransforms[] = {TransformKind::identity, TransformKind::scattering,
                                                   TransformKind::gaf, TransformKind::recurrence};

std::string_view to_string(TransformKind kind);
/// Throws std::invalid_argument on an unknown name.
TransformKind parse_transform_kind(std::string_view name);
/// GAF and recurrence produce per-channel images; the others stay 1D.
bool is_image_transform(TransformKind kind);

struct GafConfig {
  double span_constant = 1.0;  ///< N in r_i = t_i / N
};

struct RecurrenceConfig {
  std::size_t embedding_dim = 1;
  std::size_t delay = 1;
  /// Absolute threshold; when unset, eps = threshold_std_fraction * std(channel).
  std::optional<double> threshold;
  double threshold_std_fraction = 0.2;
};

struct ScatteringConfig {
  int max_order = 2;
  int q_first = 8;
  int q_second = 1;
  int octaves = 6;
  /// Averaging width and subsampling factor, in samples.
  std::size_t lowpass_scale = 64;
};

struct TransformConfig {
  GafConfig gaf;
  RecurrenceConfig recurrence;
  ScatteringConfig scattering;
  /// Piecewise-aggregate reduction applied before the image transforms; 0 keeps full length.
  std::size_t image_size = 0;
};

// --- Gramian angular field -------------------------------------------------

struct PolarEncoding {
  std::vector<double> angle;   ///< arccos of the normalized sample
  std::vector<double> radius;  ///< t_i / N, kept for inspection only
};

/// Per-window min-max scaling into [-1, 1]; a constant channel maps to zeros.
std::vector<double> minmax_normalize(std::span<const double> x);
PolarEncoding polar_encode(std::span<const double> normalized, const GafConfig& cfg);
/// G[i,j] = cos(phi_i + phi_j) for samples already in [-1, 1] (clamped).
Tensor gramian_angular_field(std::span<const double> normalized);
/// Normalizes internally, then builds the [L, L] field.
Tensor gaf_transform(std::span<const double> channel, const GafConfig& cfg = {});

// --- Recurrence plot -------------------------------------------------------

/// Binary [K, K] matrix, K = L - (m - 1) * delay.
Tensor recurrence_plot(std::span<const double> channel, const RecurrenceConfig& cfg = {});

// --- Scattering ------------------------------------------------------------

/// One-dimensional scattering cascade with Morlet wavelets and a Gaussian
/// lowpass, evaluated by circular convolution over the window.
///
/// Output layout is path-major: S0, then first-order paths in order of
/// decreasing centre frequency, then second-order paths (lambda1, lambda2)
/// restricted to lambda2 in a strictly coarser octave than lambda1. Each path
/// contributes length / lowpass_scale samples.
class Scattering1D {
 public:
  Scattering1D(std::size_t length, ScatteringConfig cfg);

  std::vector<double> operator()(std::span<const double> x) const;

  std::size_t length() const noexcept { return length_; }
  std::size_t time_samples() const noexcept { return length_ / cfg_.lowpass_scale; }
  std::size_t path_count() const noexcept;
  std::size_t output_size() const noexcept { return path_count() * time_samples(); }

  /// Frequency responses on the DFT grid k / length (k = 0..length-1).
  const std::vector<double>& lowpass_response() const noexcept { return phi_; }
  const std::vector<std::vector<double>>& first_order_responses() const noexcept { return psi1_; }
  const std::vector<std::vector<double>>& second_order_responses() const noexcept { return psi2_; }
  /// Second-order filter indices paired with each first-order filter.
  const std::vector<std::vector<std::size_t>>& second_order_paths() const noexcept { return paths2_; }

 private:
  std::size_t length_;
  ScatteringConfig cfg_;
  std::vector<double> phi_;
  std::vector<std::vector<double>> psi1_;
  std::vector<std::vector<double>> psi2_;
  std::vector<std::vector<std::size_t>> paths2_;
};

/// Throws std::invalid_argument for an unusable filter-bank configuration.
void validate_scattering(std::size_t length, const ScatteringConfig& cfg);
std::vector<double> scattering_transform(std::span<const double> channel, const ScatteringConfig& cfg = {});

// --- Whole windows ---------------------------------------------------------

std::vector<double> identity_transform(std::span<const double> channel);
/// Piecewise aggregate approximation down to `size` samples (no-op when size >= length or 0).
std::vector<double> piecewise_aggregate(std::span<const double> x, std::size_t size);

struct TransformedSample {
  TransformKind kind = TransformKind::identity;
  Tensor tensor;  ///< [C, F] for 1D kinds, [C, H, W] for images
  std::string window_id;
};

/// Transforms each channel independently and stacks them along the leading axis.
TransformedSample transform_window(const TimeSeriesWindow& window, TransformKind kind,
                                   const TransformConfig& cfg = {});

/// Output shape of transform_window for a window of the given extents.
Shape transformed_shape(TransformKind kind, std::size_t channels, std::size_t length,
                        const TransformConfig& cfg);

}  // namespace mstage
