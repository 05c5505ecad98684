#include "mstage/config.hpp"

#include <fstream>

namespace mstage {

void reject_unknown_keys(const json& object, std::initializer_list<std::string_view> allowed,
                         const std::string& path) {
  if (!object.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& [key, value] : object.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw ConfigError(key_path(path, key), "unknown key");
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

}  // namespace mstage
