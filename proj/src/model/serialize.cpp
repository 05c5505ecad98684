#include "mstage/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mstage {

namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

template <class T>
T get(std::span<const std::uint8_t> bytes, std::size_t at) {
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof v);
  return v;
}

}  // namespace

std::vector<std::uint8_t> TensorArchive::encode() const {
  json manifest{{"architecture", architecture}, {"tensors", json::array()}};
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    manifest["tensors"].push_back({{"name", t.name},
                                   {"dtype", "f64"},
                                   {"shape", t.tensor.shape()},
                                   {"trainable", t.trainable},
                                   {"offset", offset}});
    offset += t.tensor.size() * sizeof(double);
  }
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(std::begin(kArchiveMagic), std::end(kArchiveMagic));
  put(out, kArchiveVersion);
  put(out, std::uint64_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& t : tensors)
    for (double v : t.tensor.data()) put(out, v);
  return out;
}

TensorArchive TensorArchive::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw FormatError("archive: truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kArchiveMagic, 4) != 0)
    throw FormatError("archive: bad magic, not an MSTH v" + std::to_string(kArchiveVersion) + " file");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kArchiveVersion)
    throw FormatError("archive: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kArchiveVersion) + ")");
  const auto manifest_len = get<std::uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - 16) throw FormatError("archive: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(manifest_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("archive: unreadable manifest: ") + e.what());
  }
  const auto payload = bytes.subspan(16 + manifest_len);

  TensorArchive a;
  a.architecture = manifest.value("architecture", json());
  for (const auto& tj : manifest.at("tensors")) {
    if (tj.at("dtype") != "f64") throw FormatError("archive: unsupported dtype " + tj.at("dtype").dump());
    NamedTensor t;
    t.name = tj.at("name").get<std::string>();
    t.trainable = tj.at("trainable").get<bool>();
    const auto shape = tj.at("shape").get<Shape>();
    const auto offset = tj.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (offset > payload.size() || n * sizeof(double) > payload.size() - offset)
      throw FormatError("archive: truncated payload for tensor " + t.name);
    std::vector<double> data(n);
    std::memcpy(data.data(), payload.data() + offset, n * sizeof(double));
    t.tensor = Tensor(shape, std::move(data));
    a.tensors.push_back(std::move(t));
  }
  return a;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void TensorArchive::save(const std::filesystem::path& file) const {
  const auto bytes = encode();
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& file) { return decode(read_file_bytes(file)); }

namespace {

TensorArchive archive_of(Network& network, const json& metadata) {
  TensorArchive a;
  a.architecture = network.architecture();
  if (!metadata.is_null()) a.architecture["metadata"] = metadata;
  for (const auto& e : network.state()) a.tensors.push_back({e.name, *e.tensor, e.trainable()});
  return a;
}

}  // namespace

std::vector<std::uint8_t> serialize(Network& network, const json& metadata) {
  return archive_of(network, metadata).encode();
}

Network deserialize(std::span<const std::uint8_t> bytes) {
  auto a = TensorArchive::decode(bytes);
  if (!a.architecture.is_object() || !a.architecture.contains("extractor"))
    throw FormatError("archive: no network architecture in manifest");
  std::optional<Network> net;
  try {
    auto extractor = extractor_from_architecture(a.architecture.at("extractor"));
    std::optional<Classifier> head;
    if (const auto& cj = a.architecture.at("classifier"); !cj.is_null()) {
      Rng rng(0);
      head.emplace(ClassifierSpec{cj.get<std::vector<std::size_t>>()}, extractor->feature_length(), rng);
    }
    net.emplace(std::move(extractor), std::move(head));
  } catch (const json::exception& e) {
    throw FormatError(std::string("archive: bad architecture: ") + e.what());
  }
  auto state = net->state();
  if (state.size() != a.tensors.size())
    throw FormatError("archive: architecture has " + std::to_string(state.size()) + " tensors, file has " +
                      std::to_string(a.tensors.size()));
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& stored = a.tensors[i];
    if (stored.name != state[i].name) throw FormatError("archive: expected tensor " + state[i].name + ", found " + stored.name);
    if (stored.tensor.shape() != state[i].tensor->shape())
      throw FormatError("archive: tensor " + stored.name + " has shape " + shape_to_string(stored.tensor.shape()) +
                        ", architecture needs " + shape_to_string(state[i].tensor->shape()));
    *state[i].tensor = std::move(stored.tensor);
    if (state[i].param) {
      state[i].param->trainable = stored.trainable;
      state[i].param->grad = Tensor(state[i].tensor->shape());
    } else if (stored.trainable) {
      throw FormatError("archive: running statistic " + stored.name + " marked trainable");
    }
  }
  return std::move(*net);
}

void save_network(const std::filesystem::path& file, Network& network, const json& metadata) {
  archive_of(network, metadata).save(file);
}

json load_metadata(const std::filesystem::path& file) {
  return TensorArchive::load(file).architecture.value("metadata", json());
}

Network load_network(const std::filesystem::path& file) { return deserialize(read_file_bytes(file)); }

}  // namespace mstage
