#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>

#include "json.hpp"

#include "dira/errors.hpp"

namespace dira {

// Rejects any key of `j` outside `allowed`; `section` names the place in error messages.
inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in " + section);
    }
  }
}

// Reads j[key] into `out` when present, turning type errors into ConfigError.
template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

}  // namespace dira
