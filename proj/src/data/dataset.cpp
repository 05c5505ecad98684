#include "mstage/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mstage {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

bool parse_double(std::string_view tok, double& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc() && end == tok.data() + tok.size();
}

bool parse_int(std::string_view tok, long long& out) {
  auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc() && end == tok.data() + tok.size() && !tok.empty();
}

std::vector<std::vector<double>> read_matrix(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<double> row;
    std::string tok;
    while (ss >> tok) {
      double v;
      if (!parse_double(tok, v))
        throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": non-numeric token '" + tok + "'");
      row.push_back(v);
    }
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(rows.front().size()) + " values, got " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<long long> read_integers(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<long long> out;
  std::string tok;
  std::size_t lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    while (ss >> tok) {
      long long v;
      if (!parse_int(tok, v))
        throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": non-integer token '" + tok + "'");
      out.push_back(v);
    }
  }
  return out;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return std::string(s);
}

}  // namespace

// --- manifest ---------------------------------------------------------------

void DatasetManifest::validate() const {
  if (class_names.size() < 2) throw ConfigError("manifest.classes", "need at least 2 classes");
  if (window_length < kMinWindowLength)
    throw ConfigError("manifest.window_length", "below minimum " + std::to_string(kMinWindowLength));
  if (!(sampling_rate_hz > 0.0)) throw ConfigError("manifest.sampling_rate_hz", "must be positive");
}

DatasetManifest DatasetManifest::from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"name", "classes", "channels", "sampling_rate_hz", "window_length", "sources"}, path);
  DatasetManifest m;
  read_key(j, "name", m.name, path);
  read_key(j, "classes", m.class_names, path);
  read_key(j, "channels", m.channel_names, path);
  read_key(j, "sampling_rate_hz", m.sampling_rate_hz, path);
  read_key(j, "window_length", m.window_length, path);
  read_key(j, "sources", m.sources, path);
  m.validate();
  return m;
}

json DatasetManifest::to_json() const {
  return json{{"name", name},
              {"classes", class_names},
              {"channels", channel_names},
              {"sampling_rate_hz", sampling_rate_hz},
              {"window_length", window_length},
              {"sources", sources}};
}

DatasetManifest DatasetManifest::load(const fs::path& file) { return from_json(read_json_file(file.string())); }

// --- UCI HAR ----------------------------------------------------------------

std::vector<TimeSeriesWindow> load_uci_raw(const fs::path& dir) {
  fs::path signals = dir, meta = dir;
  if (fs::is_directory(dir / "Inertial Signals")) {
    signals = dir / "Inertial Signals";
  } else if (dir.filename() == "Inertial Signals" ||
             (dir.filename().empty() && dir.parent_path().filename() == "Inertial Signals")) {
    meta = (dir.filename().empty() ? dir.parent_path() : dir).parent_path();
  }
  std::string split;
  for (const auto& entry : fs::directory_iterator(signals)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("body_acc_x_", 0) == 0 && entry.path().extension() == ".txt") {
      split = name.substr(11, name.size() - 11 - 4);
      break;
    }
  }
  if (split.empty()) throw std::runtime_error("uci: no body_acc_x_*.txt in " + signals.string());

  std::vector<std::vector<std::vector<double>>> channels;
  std::vector<fs::path> files;
  for (const auto& ch : kUciChannels) {
    files.push_back(signals / (ch + "_" + split + ".txt"));
    channels.push_back(read_matrix(files.back()));
    if (channels.back().size() != channels.front().size())
      throw std::runtime_error("uci: row count mismatch: " + files.front().string() + " has " +
                               std::to_string(channels.front().size()) + " rows, " + files.back().string() + " has " +
                               std::to_string(channels.back().size()));
    if (!channels.back().empty() && channels.back().front().size() != channels.front().front().size())
      throw std::runtime_error("uci: window length differs between " + files.front().string() + " and " +
                               files.back().string());
  }
  auto find_meta = [&](const std::string& stem) {
    for (const auto& d : {meta, signals})
      if (fs::exists(d / (stem + "_" + split + ".txt"))) return d / (stem + "_" + split + ".txt");
    return fs::path{};
  };
  const fs::path label_file = find_meta("y");
  if (label_file.empty()) throw std::runtime_error("uci: missing y_" + split + ".txt near " + signals.string());
  const auto labels = read_integers(label_file);
  const std::size_t rows = channels.front().size();
  if (labels.size() != rows)
    throw std::runtime_error("uci: row count mismatch: " + files.front().string() + " has " + std::to_string(rows) +
                             " rows, " + label_file.string() + " has " + std::to_string(labels.size()));
  std::vector<long long> subjects;
  if (auto subject_file = find_meta("subject"); !subject_file.empty()) {
    subjects = read_integers(subject_file);
    if (subjects.size() != rows)
      throw std::runtime_error("uci: row count mismatch: " + files.front().string() + " has " + std::to_string(rows) +
                               " rows, " + subject_file.string() + " has " + std::to_string(subjects.size()));
  }

  std::vector<TimeSeriesWindow> out;
  out.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 1 || labels[r] > long(kUciClasses.size()))
      throw std::runtime_error(label_file.string() + ":" + std::to_string(r + 1) + ": label " +
                               std::to_string(labels[r]) + " outside 1.." + std::to_string(kUciClasses.size()));
    std::vector<std::vector<double>> values;
    for (auto& ch : channels) values.push_back(std::move(ch[r]));
    auto w = make_window(split + "-" + std::to_string(r), values, 50.0, int(labels[r] - 1));
    if (!subjects.empty()) w.subject = int(subjects[r]);
    out.push_back(std::move(w));
  }
  return out;
}

// --- canonical CSV ------------------------------------------------------------

void write_canonical_csv(std::ostream& out, const std::vector<TimeSeriesWindow>& windows) {
  out << "window_id,channel,t,value,label\n";
  for (const auto& w : windows) {
    if (w.id.find(',') != std::string::npos) throw std::invalid_argument("csv: window id contains a comma: " + w.id);
    const std::string label = w.label ? std::to_string(*w.label) : "";
    for (std::size_t c = 0; c < w.channels(); ++c) {
      auto ch = w.channel(c);
      for (std::size_t t = 0; t < ch.size(); ++t)
        out << w.id << ',' << c << ',' << t << ',' << format_double(ch[t]) << ',' << label << '\n';
    }
  }
}

void write_canonical_csv(const fs::path& file, const std::vector<TimeSeriesWindow>& windows) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  write_canonical_csv(out, windows);
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::vector<TimeSeriesWindow> read_canonical_csv(std::istream& in, const DatasetManifest& manifest,
                                                 const std::string& source) {
  struct Partial {
    std::map<std::size_t, std::map<std::size_t, double>> samples;  // channel -> t -> value
    std::optional<int> label;
    bool label_seen = false;
  };
  std::vector<std::string> order;
  std::map<std::string, Partial> partial;

  auto where = [&](std::size_t lineno) { return source + ":" + std::to_string(lineno) + ": "; };
  std::string line;
  if (!std::getline(in, line) || trim(line) != "window_id,channel,t,value,label")
    throw std::runtime_error(source + ": expected header window_id,channel,t,value,label");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv(line);
    if (f.size() != 5) throw std::runtime_error(where(lineno) + "expected 5 fields, got " + std::to_string(f.size()));
    const std::string id = trim(f[0]), chan = trim(f[1]), label_tok = trim(f[4]);

    long long c = -1;
    if (auto it = std::find(manifest.channel_names.begin(), manifest.channel_names.end(), chan);
        it != manifest.channel_names.end())
      c = it - manifest.channel_names.begin();
    else if (!parse_int(chan, c) || c < 0)
      throw std::runtime_error(where(lineno) + "bad channel '" + chan + "'");
    if (!manifest.channel_names.empty() && c >= long(manifest.channel_names.size()))
      throw std::runtime_error(where(lineno) + "channel " + chan + " not declared in manifest");

    long long t;
    if (!parse_int(trim(f[2]), t) || t < 0) throw std::runtime_error(where(lineno) + "bad t '" + trim(f[2]) + "'");
    double v;
    if (!parse_double(trim(f[3]), v)) throw std::runtime_error(where(lineno) + "bad value '" + trim(f[3]) + "'");

    std::optional<int> label;
    if (!label_tok.empty()) {
      long long k;
      if (auto it = std::find(manifest.class_names.begin(), manifest.class_names.end(), label_tok);
          it != manifest.class_names.end())
        k = it - manifest.class_names.begin();
      else if (!parse_int(label_tok, k))
        throw std::runtime_error(where(lineno) + "bad label '" + label_tok + "'");
      if (k < 0 || (!manifest.class_names.empty() && k >= long(manifest.class_names.size())))
        throw std::runtime_error(where(lineno) + "label " + label_tok + " out of range");
      label = int(k);
    }

    auto [it, fresh] = partial.try_emplace(id);
    if (fresh) order.push_back(id);
    Partial& p = it->second;
    if (p.label_seen && p.label != label)
      throw std::runtime_error(where(lineno) + "inconsistent label within window " + id);
    p.label = label;
    p.label_seen = true;
    if (!p.samples[std::size_t(c)].emplace(std::size_t(t), v).second)
      throw std::runtime_error(where(lineno) + "duplicate sample (" + id + ", channel " + chan + ", t " +
                               std::to_string(t) + ")");
  }

  std::vector<TimeSeriesWindow> out;
  const std::size_t n_channels = manifest.channel_names.empty() ? 0 : manifest.channel_names.size();
  for (const auto& id : order) {
    const Partial& p = partial.at(id);
    const std::size_t channels = n_channels ? n_channels : p.samples.rbegin()->first + 1;
    std::vector<std::vector<double>> values(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      auto it = p.samples.find(c);
      if (it == p.samples.end())
        throw std::runtime_error(source + ": window " + id + " is missing channel " + std::to_string(c));
      for (std::size_t t = 0; t < manifest.window_length; ++t) {
        auto s = it->second.find(t);
        if (s == it->second.end())
          throw std::runtime_error(source + ": window " + id + ", channel " + std::to_string(c) +
                                   ": missing sample at t=" + std::to_string(t));
        values[c].push_back(s->second);
      }
      if (it->second.size() != manifest.window_length)
        throw std::runtime_error(source + ": window " + id + ", channel " + std::to_string(c) + " has " +
                                 std::to_string(it->second.size()) + " samples, manifest declares " +
                                 std::to_string(manifest.window_length));
    }
    out.push_back(make_window(id, values, manifest.sampling_rate_hz, p.label));
  }
  return out;
}

std::vector<TimeSeriesWindow> load_canonical_csv(const fs::path& file, const DatasetManifest& manifest) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  return read_canonical_csv(in, manifest, file.string());
}

std::vector<TimeSeriesWindow> load_manifest_dataset(const fs::path& manifest_file) {
  const auto m = DatasetManifest::load(manifest_file);
  if (m.sources.empty()) throw ConfigError("manifest.sources", "no source files");
  std::vector<TimeSeriesWindow> out;
  for (const auto& s : m.sources) {
    fs::path p = s;
    if (p.is_relative()) p = manifest_file.parent_path() / p;
    auto part = load_canonical_csv(p, m);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

// --- folds --------------------------------------------------------------------

FoldSplit::FoldSplit(std::size_t k, std::map<std::string, std::size_t> fold_of) : k_(k), fold_of_(std::move(fold_of)) {
  if (k < 2) throw std::invalid_argument("folds: k must be >= 2");
  for (const auto& [id, f] : fold_of_)
    if (f >= k) throw std::invalid_argument("folds: window " + id + " assigned to fold " + std::to_string(f));
}

std::size_t FoldSplit::fold_of(const std::string& id) const {
  auto it = fold_of_.find(id);
  if (it == fold_of_.end()) throw std::out_of_range("folds: unknown window " + id);
  return it->second;
}

FoldRole FoldSplit::role(const TimeSeriesWindow& w, std::size_t phase) const {
  if (phase >= k_) throw std::out_of_range("folds: phase " + std::to_string(phase) + " >= k");
  if (!w.provenance.augmented) return fold_of(w.id) == phase ? FoldRole::test : FoldRole::train;
  if (fold_of(w.provenance.source_id) == phase)
    throw std::logic_error("firewall: augmented window " + w.id + " derives from test-fold window " +
                           w.provenance.source_id);
  return FoldRole::train;
}

std::vector<std::size_t> FoldSplit::fold_sizes() const {
  std::vector<std::size_t> sizes(k_, 0);
  for (const auto& [id, f] : fold_of_) ++sizes[f];
  return sizes;
}

FoldSplit make_folds(const std::vector<TimeSeriesWindow>& windows, std::size_t k, std::uint64_t seed,
                     bool stratify_by_class) {
  if (windows.size() < k) throw std::invalid_argument("folds: fewer windows than folds");
  std::mt19937_64 rng(seed);
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].provenance.augmented) throw std::invalid_argument("folds: augmented window " + windows[i].id);
    groups[stratify_by_class ? windows[i].label.value_or(-1) : 0].push_back(i);
  }
  std::vector<std::size_t> dealt;
  for (auto& [label, members] : groups) {
    std::shuffle(members.begin(), members.end(), rng);
    dealt.insert(dealt.end(), members.begin(), members.end());
  }
  std::map<std::string, std::size_t> fold_of;
  for (std::size_t pos = 0; pos < dealt.size(); ++pos)
    if (!fold_of.emplace(windows[dealt[pos]].id, pos % k).second)
      throw std::invalid_argument("folds: duplicate window id " + windows[dealt[pos]].id);
  return FoldSplit(k, std::move(fold_of));
}

FoldSplit make_subject_folds(const std::vector<TimeSeriesWindow>& windows, std::size_t k, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (!windows[i].subject) throw std::invalid_argument("folds: window " + windows[i].id + " has no subject");
    by_subject[*windows[i].subject].push_back(i);
  }
  if (by_subject.size() < k) throw std::invalid_argument("folds: fewer subjects than folds");
  std::vector<int> subjects;
  for (const auto& [s, m] : by_subject) subjects.push_back(s);
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::stable_sort(subjects.begin(), subjects.end(),
                   [&](int a, int b) { return by_subject[a].size() > by_subject[b].size(); });
  std::vector<std::size_t> load(k, 0);
  std::map<std::string, std::size_t> fold_of;
  for (int s : subjects) {
    const std::size_t f = std::min_element(load.begin(), load.end()) - load.begin();
    load[f] += by_subject[s].size();
    for (auto i : by_subject[s]) fold_of[windows[i].id] = f;
  }
  return FoldSplit(k, std::move(fold_of));
}

FoldPartition partition(const std::vector<TimeSeriesWindow>& windows, const FoldSplit& split, std::size_t phase) {
  FoldPartition p;
  for (const auto& w : windows) (split.role(w, phase) == FoldRole::test ? p.test : p.train).push_back(w);
  return p;
}

std::size_t firewall_violations(const FoldPartition& p) {
  std::set<std::string> test_ids;
  std::size_t n = 0;
  for (const auto& w : p.test) {
    test_ids.insert(w.id);
    if (w.provenance.augmented) ++n;
  }
  for (const auto& w : p.train)
    if (w.provenance.augmented && test_ids.count(w.provenance.source_id)) ++n;
  return n;
}

std::pair<std::vector<TimeSeriesWindow>, std::vector<TimeSeriesWindow>> stratified_holdout(
    const std::vector<TimeSeriesWindow>& windows, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("holdout: fraction must be in [0, 1)");
  std::mt19937_64 rng(seed);
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < windows.size(); ++i) groups[windows[i].label.value_or(-1)].push_back(i);
  std::vector<bool> held(windows.size(), false);
  for (auto& [label, members] : groups) {
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t n = std::size_t(std::llround(fraction * double(members.size())));
    if (fraction > 0.0 && members.size() >= 2) n = std::max<std::size_t>(n, 1);
    n = std::min(n, members.size() - 1);
    for (std::size_t j = 0; j < n; ++j) held[members[j]] = true;
  }
  std::pair<std::vector<TimeSeriesWindow>, std::vector<TimeSeriesWindow>> out;
  for (std::size_t i = 0; i < windows.size(); ++i) (held[i] ? out.second : out.first).push_back(windows[i]);
  return out;
}

// --- synthetic data -----------------------------------------------------------

double synth_frequency(std::size_t k) { return 2.0 + 2.5 * double(k); }

std::vector<TimeSeriesWindow> synth_generate(const SynthSpec& spec) {
  if (spec.classes < 2 || spec.channels < 1 || spec.n_per_class < 1 || spec.length < kMinWindowLength)
    throw std::invalid_argument("synth: need >= 2 classes, >= 1 channel and window, length >= 8");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> jitter(-std::numbers::pi / 8, std::numbers::pi / 8);
  std::uniform_real_distribution<double> amp(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  const double two_pi = 2.0 * std::numbers::pi, L = double(spec.length);

  std::vector<TimeSeriesWindow> out;
  out.reserve(spec.classes * spec.n_per_class);
  for (std::size_t i = 0; i < spec.n_per_class; ++i)
    for (std::size_t k = 0; k < spec.classes; ++k) {
      const double f = synth_frequency(k), g = 1.5 * f;
      const double theta = jitter(rng), a = amp(rng);
      std::vector<std::vector<double>> values(spec.channels, std::vector<double>(spec.length));
      for (std::size_t c = 0; c < spec.channels; ++c) {
        // Class-specific phase coupling between channels.
        const double phase = two_pi * double((k + 1) * (c + 1)) / double(spec.channels + 2);
        const double weight = 0.3 + 0.2 * double((k + c) % 3);
        for (std::size_t t = 0; t < spec.length; ++t) {
          const double u = double(t) / L;
          values[c][t] = a * (std::sin(two_pi * f * u + theta + phase) +
                              weight * std::sin(two_pi * g * u + 2.0 * theta - phase)) +
                         noise(rng);
        }
      }
      auto w = make_window("synth-" + std::to_string(k) + "-" + std::to_string(i), values, 50.0, int(k));
      w.subject = int(i % 10);
      out.push_back(std::move(w));
    }
  return out;
}

DatasetManifest synth_manifest(const SynthSpec& spec) {
  DatasetManifest m;
  m.name = "synth";
  for (std::size_t k = 0; k < spec.classes; ++k) m.class_names.push_back("class" + std::to_string(k));
  for (std::size_t c = 0; c < spec.channels; ++c) m.channel_names.push_back("ch" + std::to_string(c));
  m.window_length = spec.length;
  return m;
}

// --- normalization --------------------------------------------------------------

ZScore ZScore::fit(const std::vector<TimeSeriesWindow>& windows) {
  if (windows.empty()) throw std::invalid_argument("zscore: no windows");
  const std::size_t C = windows.front().channels();
  ZScore z{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  std::vector<double> count(C, 0.0);
  for (const auto& w : windows) {
    if (w.channels() != C) throw std::invalid_argument("zscore: channel count differs in " + w.id);
    for (std::size_t c = 0; c < C; ++c)
      for (double v : w.channel(c)) {
        z.mean[c] += v;
        count[c] += 1.0;
      }
  }
  for (std::size_t c = 0; c < C; ++c) z.mean[c] /= count[c];
  for (const auto& w : windows)
    for (std::size_t c = 0; c < C; ++c)
      for (double v : w.channel(c)) z.std[c] += (v - z.mean[c]) * (v - z.mean[c]);
  for (std::size_t c = 0; c < C; ++c) {
    z.std[c] = std::sqrt(z.std[c] / count[c]);
    if (!(z.std[c] > 0.0)) z.std[c] = 1.0;
  }
  return z;
}

TimeSeriesWindow ZScore::apply(const TimeSeriesWindow& w) const {
  if (w.channels() != mean.size()) throw std::invalid_argument("zscore: channel count differs in " + w.id);
  TimeSeriesWindow out = w;
  for (std::size_t c = 0; c < w.channels(); ++c)
    for (double& v : out.channel(c)) v = (v - mean[c]) / std[c];
  return out;
}

std::vector<TimeSeriesWindow> ZScore::apply(const std::vector<TimeSeriesWindow>& ws) const {
  std::vector<TimeSeriesWindow> out;
  out.reserve(ws.size());
  for (const auto& w : ws) out.push_back(apply(w));
  return out;
}

std::map<int, std::size_t> class_counts(const std::vector<TimeSeriesWindow>& windows) {
  std::map<int, std::size_t> n;
  for (const auto& w : windows) ++n[w.label.value_or(-1)];
  return n;
}

}  // namespace mstage
