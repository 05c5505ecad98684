#include "mstage/window.hpp"

#include <stdexcept>

namespace mstage {

void TimeSeriesWindow::validate() const {
  if (values.rank() != 2)
    throw std::invalid_argument("window " + id + ": values must be [channels, length]");
  if (length() < kMinWindowLength)
    throw std::invalid_argument("window " + id + ": length " + std::to_string(length()) +
                                " below minimum " + std::to_string(kMinWindowLength));
  if (!(sampling_rate_hz > 0.0))
    throw std::invalid_argument("window " + id + ": sampling rate must be positive");
  if (!values.all_finite()) throw std::invalid_argument("window " + id + ": non-finite sample");
}

TimeSeriesWindow make_window(std::string id, const std::vector<std::vector<double>>& channels,
                             double sampling_rate_hz, std::optional<int> label) {
  if (channels.empty()) throw std::invalid_argument("make_window: no channels");
  const std::size_t len = channels.front().size();
  std::vector<double> flat;
  flat.reserve(channels.size() * len);
  for (const auto& ch : channels) {
    if (ch.size() != len) throw std::invalid_argument("make_window: channels differ in length");
    flat.insert(flat.end(), ch.begin(), ch.end());
  }
  TimeSeriesWindow w;
  w.id = std::move(id);
  w.values = Tensor({channels.size(), len}, std::move(flat));
  w.sampling_rate_hz = sampling_rate_hz;
  w.label = label;
  w.provenance.source_id = w.id;
  w.validate();
  return w;
}

}  // namespace mstage
