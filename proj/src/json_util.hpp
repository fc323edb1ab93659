#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <initializer_list>
#include <string>

#include "kinetos/errors.hpp"
#include "kinetos/types.hpp"

namespace kinetos::detail {

inline double number_at(const nlohmann::json& j, const char* key, const std::string& path) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw ConfigError(path + "." + key, "expected a number");
  }
  return j.at(key).get<double>();
}

inline void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
}

inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& path) {
  require_object(j, path);
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
        allowed.end()) {
      throw ConfigError(path + "." + key, "unknown key");
    }
  }
}

inline Vec3 vec_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(path, "expected an array of 3 numbers");
  Vec3 v;
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number()) throw ConfigError(path, "expected an array of 3 numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

inline nlohmann::json vec_to_json(const Vec3& v) { return {v[0], v[1], v[2]}; }

// Row-major list of 9 numbers.
inline Mat3 mat_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 9) throw ConfigError(path, "expected an array of 9 numbers");
  Mat3 m;
  for (int i = 0; i < 9; ++i) {
    if (!j[i].is_number()) throw ConfigError(path, "expected an array of 9 numbers");
    m(i / 3, i % 3) = j[i].get<double>();
  }
  return m;
}

inline nlohmann::json mat_to_json(const Mat3& m) {
  nlohmann::json j = nlohmann::json::array();
  for (int i = 0; i < 9; ++i) j.push_back(m(i / 3, i % 3));
  return j;
}

}  // namespace kinetos::detail
