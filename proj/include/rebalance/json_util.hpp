#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "json.hpp"
#include "rebalance/error.hpp"

namespace rebalance {

/// Insertion-ordered JSON; doubles serialize as shortest round-trip decimals.
using Json = nlohmann::ordered_json;

namespace json_util {

inline Json parse(std::string_view text, const std::string& where) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw data_error("parse", where + ": " + e.what());
  }
}

inline const Json& member(const Json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw data_error("schema", where + ": expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw data_error("schema", where + ": missing field '" + key + "'");
  }
  return *it;
}

inline double number(const Json& obj, const char* key, const std::string& where) {
  const Json& v = member(obj, key, where);
  if (!v.is_number()) {
    throw data_error("schema", where + ": field '" + key + "' must be a number");
  }
  return v.get<double>();
}

inline double finite_number(const Json& obj, const char* key, const std::string& where) {
  double x = number(obj, key, where);
  if (!std::isfinite(x)) {
    throw data_error("schema", where + ": field '" + key + "' must be finite");
  }
  return x;
}

inline std::int64_t integer(const Json& obj, const char* key, const std::string& where) {
  const Json& v = member(obj, key, where);
  if (!v.is_number_integer()) {
    throw data_error("schema", where + ": field '" + key + "' must be an integer");
  }
  return v.get<std::int64_t>();
}

inline std::uint64_t index(const Json& obj, const char* key, const std::string& where) {
  std::int64_t v = integer(obj, key, where);
  if (v < 0) {
    throw data_error("schema", where + ": field '" + key + "' must be non-negative");
  }
  return static_cast<std::uint64_t>(v);
}

inline std::string string(const Json& obj, const char* key, const std::string& where) {
  const Json& v = member(obj, key, where);
  if (!v.is_string()) {
    throw data_error("schema", where + ": field '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

inline bool boolean(const Json& obj, const char* key, const std::string& where) {
  const Json& v = member(obj, key, where);
  if (!v.is_boolean()) {
    throw data_error("schema", where + ": field '" + key + "' must be a boolean");
  }
  return v.get<bool>();
}

/// Rejects keys outside the allowed set (strict artifact schemas).
inline void only_keys(const Json& obj, std::initializer_list<const char*> allowed,
                      const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw data_error("schema", where + ": unexpected field '" + it.key() + "'");
  }
}

/// JSON has no infinities; non-finite values are written as null.
inline Json finite_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

}  // namespace json_util
}  // namespace rebalance
