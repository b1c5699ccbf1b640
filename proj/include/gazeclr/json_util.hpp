#pragma once

#include <nlohmann/json.hpp>

#include <set>
#include <string>
#include <vector>

#include "gazeclr/errors.hpp"

namespace gazeclr {

using Json = nlohmann::json;

/// Reads fields of one JSON object, rejecting unknown keys and type mismatches
/// with a ConfigError naming the dotted key path.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename V>
  void read(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const Json::exception&) {
      throw ConfigError(key_path(key), "has the wrong type (got " + std::string(j_.at(key).type_name()) + ")");
    }
  }

  /// Nested object; call finish() on the returned reader.
  ObjectReader child(const std::string& key) {
    seen_.insert(key);
    static const Json empty = Json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, key_path(key));
  }

  const Json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown configuration key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace gazeclr
