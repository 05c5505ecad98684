#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace mstage {

using json = nlohmann::json;

/// Bad configuration value; the message starts with the offending key path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key_path, const std::string& message)
      : std::runtime_error(key_path + ": " + message), key_path_(std::move(key_path)) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

/// Throws ConfigError naming `path.key` for the first key not in `allowed`.
void reject_unknown_keys(const json& object, std::initializer_list<std::string_view> allowed,
                         const std::string& path);

inline std::string key_path(const std::string& parent, std::string_view key) {
  return parent.empty() ? std::string(key) : parent + "." + std::string(key);
}

/// Reads `object[key]` into `out` if present; a type mismatch becomes a ConfigError.
template <class T>
void read_key(const json& object, std::string_view key, T& out, const std::string& path) {
  auto it = object.find(std::string(key));
  if (it == object.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key_path(path, key), std::string("wrong type (") + it->type_name() + ")");
  }
}

json read_json_file(const std::string& path);

}  // namespace mstage
