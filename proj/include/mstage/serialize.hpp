#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mstage/config.hpp"
#include "mstage/model.hpp"

namespace mstage {

inline constexpr char kArchiveMagic[4] = {'M', 'S', 'T', 'H'};
inline constexpr std::uint32_t kArchiveVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = false;
};

/// "MSTH", u32 version, u64 manifest length, JSON manifest, then the tensors
/// as little-endian f64 in manifest order. Offsets are relative to the payload.
struct TensorArchive {
  json architecture;
  std::vector<NamedTensor> tensors;

  std::vector<std::uint8_t> encode() const;
  static TensorArchive decode(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& file) const;
  static TensorArchive load(const std::filesystem::path& file);
};

/// Optional metadata (preprocessing, class names) is kept under the manifest's
/// "metadata" key and ignored when rebuilding the network.
std::vector<std::uint8_t> serialize(Network& network, const json& metadata = json());
Network deserialize(std::span<const std::uint8_t> bytes);
void save_network(const std::filesystem::path& file, Network& network, const json& metadata = json());
Network load_network(const std::filesystem::path& file);
json load_metadata(const std::filesystem::path& file);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& file);

}  // namespace mstage
