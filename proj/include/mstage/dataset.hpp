#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mstage/config.hpp"
#include "mstage/window.hpp"

namespace mstage {

struct DatasetManifest {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<std::string> channel_names;
  double sampling_rate_hz = 50.0;
  std::size_t window_length = 128;
  /// Canonical CSV files, relative to the manifest's directory.
  std::vector<std::string> sources;

  void validate() const;
  static DatasetManifest from_json(const json& j, const std::string& path = "manifest");
  json to_json() const;
  static DatasetManifest load(const std::filesystem::path& file);
};

inline const std::vector<std::string> kUciChannels = {
    "body_acc_x", "body_acc_y", "body_acc_z", "body_gyro_x", "body_gyro_y",
    "body_gyro_z", "total_acc_x", "total_acc_y", "total_acc_z"};
inline const std::vector<std::string> kUciClasses = {"walk",    "upstairs", "downstairs",
                                                     "sitting", "standing", "laying"};

/// Reads one UCI HAR split. `dir` may be the split directory (holding y_*.txt)
/// or its "Inertial Signals" subdirectory.
std::vector<TimeSeriesWindow> load_uci_raw(const std::filesystem::path& dir);

/// Long format, header "window_id,channel,t,value,label"; values round-trip exactly.
void write_canonical_csv(std::ostream& out, const std::vector<TimeSeriesWindow>& windows);
void write_canonical_csv(const std::filesystem::path& file, const std::vector<TimeSeriesWindow>& windows);
std::vector<TimeSeriesWindow> read_canonical_csv(std::istream& in, const DatasetManifest& manifest,
                                                 const std::string& source = "<stream>");
std::vector<TimeSeriesWindow> load_canonical_csv(const std::filesystem::path& file, const DatasetManifest& manifest);
/// All sources of a manifest file, in order.
std::vector<TimeSeriesWindow> load_manifest_dataset(const std::filesystem::path& manifest_file);

enum class FoldRole { train, test };

/// Window id -> fold index. In phase p, fold p is the test fold.
class FoldSplit {
 public:
  FoldSplit(std::size_t k, std::map<std::string, std::size_t> fold_of);

  std::size_t k() const noexcept { return k_; }
  std::size_t fold_of(const std::string& window_id) const;
  /// Augmented windows take the role of their source; one derived from a
  /// test-fold window is a firewall breach and throws std::logic_error.
  FoldRole role(const TimeSeriesWindow& w, std::size_t phase) const;
  std::vector<std::size_t> fold_sizes() const;
  const std::map<std::string, std::size_t>& assignments() const noexcept { return fold_of_; }

 private:
  std::size_t k_;
  std::map<std::string, std::size_t> fold_of_;
};

/// Stratified: each class is shuffled and dealt round-robin after the previous
/// class, so fold sizes and per-class counts differ by at most one.
FoldSplit make_folds(const std::vector<TimeSeriesWindow>& windows, std::size_t k, std::uint64_t seed,
                     bool stratify_by_class = true);
/// Whole subjects per fold, largest subjects placed first into the emptiest fold.
FoldSplit make_subject_folds(const std::vector<TimeSeriesWindow>& windows, std::size_t k, std::uint64_t seed);

struct FoldPartition {
  std::vector<TimeSeriesWindow> train;
  std::vector<TimeSeriesWindow> test;
};

FoldPartition partition(const std::vector<TimeSeriesWindow>& windows, const FoldSplit& split, std::size_t phase);

/// Augmented windows in the test set plus augmented training windows whose
/// source sits in the test set. Zero for a clean partition.
std::size_t firewall_violations(const FoldPartition& p);

/// Stratified hold-out of `fraction` of the windows (at least one per class
/// with two or more members). Returns {kept, held_out}.
std::pair<std::vector<TimeSeriesWindow>, std::vector<TimeSeriesWindow>> stratified_holdout(
    const std::vector<TimeSeriesWindow>& windows, double fraction, std::uint64_t seed);

struct SynthSpec {
  std::size_t n_per_class = 150;
  std::size_t classes = 4;
  std::size_t channels = 3;
  std::size_t length = 128;
  std::uint64_t seed = 42;
  double noise_std = 0.3;
};

/// Dominant frequency of class k, in cycles per window.
double synth_frequency(std::size_t k);
/// Sinusoid banks with class-specific frequencies and inter-channel phase
/// offsets, small per-window phase and amplitude jitter, Gaussian noise.
std::vector<TimeSeriesWindow> synth_generate(const SynthSpec& spec);
DatasetManifest synth_manifest(const SynthSpec& spec);

/// Per-channel mean/std from training windows; constant channels get std 1.
struct ZScore {
  std::vector<double> mean;
  std::vector<double> std;

  static ZScore fit(const std::vector<TimeSeriesWindow>& windows);
  TimeSeriesWindow apply(const TimeSeriesWindow& w) const;
  std::vector<TimeSeriesWindow> apply(const std::vector<TimeSeriesWindow>& ws) const;
};

std::map<int, std::size_t> class_counts(const std::vector<TimeSeriesWindow>& windows);

}  // namespace mstage
