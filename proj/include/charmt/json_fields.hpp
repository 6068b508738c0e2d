#pragma once

#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace charmt {

/// Strict reader for one JSON object section. Type errors and unknown keys
/// are appended to a shared error list instead of throwing, so a config can
/// report every problem at once.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& object, std::string section, std::vector<std::string>& errors)
      : object_(object), section_(std::move(section)), errors_(errors) {
    if (!object_.is_object()) {
      errors_.push_back(section_ + ": expected an object");
      valid_ = false;
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!valid_ || !object_.contains(key)) return;
    try {
      out = object_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(path(key) + ": wrong type (" + object_.at(key).dump() + ")");
    }
  }

  /// Returns the sub-object for key, or null when absent.
  const nlohmann::json* section(const std::string& key) {
    seen_.insert(key);
    if (!valid_ || !object_.contains(key)) return nullptr;
    return &object_.at(key);
  }

  void reject_unknown() {
    if (!valid_) return;
    for (const auto& [key, value] : object_.items()) {
      if (!seen_.count(key)) errors_.push_back(path(key) + ": unknown key");
    }
  }

  std::string path(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }
  void error(const std::string& key, const std::string& message) { errors_.push_back(path(key) + ": " + message); }

 private:
  const nlohmann::json& object_;
  std::string section_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
  bool valid_ = true;
};

}  // namespace charmt
