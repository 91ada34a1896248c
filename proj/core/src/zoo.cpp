#include "sgba/zoo.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace sgba::bench {

namespace fs = std::filesystem;

ZooRegistry::ZooRegistry(std::string dir, std::string config_hash)
    : dir_(std::move(dir)), config_hash_(std::move(config_hash)) {
  fs::create_directories(dir_);
  const std::string index = dir_ + "/zoo.json";
  if (fs::exists(index)) {
    std::ifstream in(index);
    const auto j = nlohmann::json::parse(in);
    const auto stored = j.at("config_hash").get<std::string>();
    if (stored != config_hash_) {
      throw Error(ErrorCode::kConfigMismatch, "zoo " + dir_ + " was built with config " + stored +
                                                  ", current config is " + config_hash_ +
                                                  "; use a fresh output directory");
    }
    return;
  }
  std::ofstream out(index, std::ios::trunc);
  out << nlohmann::json{{"config_hash", config_hash_}}.dump(2) << '\n';
}

bool ZooRegistry::has(const std::string& id) const {
  if (!fs::exists(stem(id) + ".json") || !fs::exists(stem(id) + ".weights")) return false;
  const auto m = load_manifest(stem(id));
  return m.value("config_hash", "") == config_hash_;
}

ModelRecord ZooRegistry::load(const std::string& id) const {
  if (!has(id)) throw Error(ErrorCode::kNotFound, "model " + id + " is not in zoo " + dir_);
  return load_checkpoint(stem(id));
}

nlohmann::json ZooRegistry::meta(const std::string& id) const {
  if (!has(id)) throw Error(ErrorCode::kNotFound, "model " + id + " is not in zoo " + dir_);
  return load_manifest(stem(id)).value("meta", nlohmann::json::object());
}

void ZooRegistry::put(const std::string& id, const ModelRecord& model, const nlohmann::json& meta) {
  save_checkpoint(model, stem(id), {{"id", id}, {"config_hash", config_hash_}, {"meta", meta}});
}

std::vector<std::string> ZooRegistry::ids(std::optional<Provenance> provenance) const {
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir_)) {
    if (entry.path().extension() != ".weights") continue;
    const std::string id = entry.path().stem().string();
    if (!has(id)) continue;
    if (provenance) {
      const auto m = load_manifest(stem(id));
      if (provenance_from_string(m.at("provenance").get<std::string>()) != *provenance) continue;
    }
    out.push_back(id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sgba::bench
