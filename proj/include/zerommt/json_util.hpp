// Small helpers for strict JSON config parsing.
#pragma once

#include <nlohmann/json.hpp>

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

namespace zerommt {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws ConfigError if `obj` has a key outside `allowed`.
inline void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (std::string_view a : allowed) known = known || a == key;
    if (!known) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

/// Assigns obj[key] to `out` when present.
template <typename T>
void read_optional(const Json& obj, std::string_view key, T& out, std::string_view where) {
  const auto it = obj.find(std::string(key));
  if (it == obj.end()) return;
  try {
    out = it->template get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string(where) + "." + std::string(key) + ": " + e.what());
  }
}

}  // namespace zerommt
