#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mstage/tensor.hpp"

namespace mstage {

inline constexpr std::size_t kMinWindowLength = 8;

/// Where a window came from. Augmented windows keep the id of the original
/// they were derived from so fold membership can be audited.
struct Provenance {
  std::string source_id;
  bool augmented = false;
};

/// Fixed-length multichannel sensor segment, values shaped [channels, length].
struct TimeSeriesWindow {
  std::string id;
  Tensor values;
  double sampling_rate_hz = 50.0;
  std::optional<int> label;
  std::optional<int> subject;
  Provenance provenance;

  std::size_t channels() const { return values.dim(0); }
  std::size_t length() const { return values.dim(1); }

  std::span<const double> channel(std::size_t c) const {
    return values.data().subspan(c * length(), length());
  }
  std::span<double> channel(std::size_t c) { return values.data().subspan(c * length(), length()); }

  /// Throws std::invalid_argument if the window breaks its invariants.
  void validate() const;
};

TimeSeriesWindow make_window(std::string id, const std::vector<std::vector<double>>& channels,
                             double sampling_rate_hz, std::optional<int> label = std::nullopt);

}  // namespace mstage
