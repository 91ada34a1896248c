#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/modelkit.hpp"

namespace sgba::bench {

// On-disk model registry: <dir>/<id>.weights + <id>.json, plus <dir>/zoo.json
// holding the config hash the zoo was built with. Opening a zoo built under a
// different hash throws kConfigMismatch.
class ZooRegistry {
 public:
  ZooRegistry(std::string dir, std::string config_hash);

  const std::string& dir() const { return dir_; }
  const std::string& config_hash() const { return config_hash_; }

  // True iff a checkpoint for `id` exists and records this zoo's config hash.
  bool has(const std::string& id) const;
  ModelRecord load(const std::string& id) const;
  // The "meta" object stored with the model.
  nlohmann::json meta(const std::string& id) const;
  void put(const std::string& id, const ModelRecord& model, const nlohmann::json& meta);

  // Sorted ids, optionally filtered by provenance.
  std::vector<std::string> ids(std::optional<Provenance> provenance = std::nullopt) const;
  std::string stem(const std::string& id) const { return dir_ + "/" + id; }

 private:
  std::string dir_;
  std::string config_hash_;
};

}  // namespace sgba::bench
