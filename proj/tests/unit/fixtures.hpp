#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sgba/attack.hpp"
#include "sgba/datasets.hpp"
#include "sgba/modelkit.hpp"

namespace sgba::testing {

struct Fixture {
  LabeledImages train;
  LabeledImages test;
  LabeledImages holdout;
};

// 1500 train / 300 test / 300 holdout synthetic images, built once per process.
inline const Fixture& data() {
  static const Fixture f = [] {
    Fixture out;
    out.train = data::make_synthetic(1500, 101);
    out.test = data::make_synthetic(300, 202);
    out.holdout = data::make_synthetic(300, 303);
    return out;
  }();
  return f;
}

inline TrainOptions quick_options(int epochs = 4, std::uint64_t seed = 5) {
  TrainOptions o;
  o.epochs = epochs;
  o.seed = seed;
  o.eval = &data().test;
  return o;
}

inline const ModelRecord& clean_model() {
  static const ModelRecord m = train(build_model("mnist-lite", 11), data().train, quick_options());
  return m;
}

inline const attack::Patch& badnets_patch() {
  static const attack::Patch p = attack::default_badnets_patch(data().train.shape, 4);
  return p;
}

inline constexpr int kBadNetsTarget = 3;

inline const ModelRecord& badnets_model() {
  static const ModelRecord m = [] {
    auto set = attack::build_badnets_set(data().train, badnets_patch(), kBadNetsTarget, 0.1, 17);
    // The small patch needs more epochs than the clean task to leave its plateau.
    auto o = quick_options(12);
    o.provenance = Provenance::kBadNets;
    return train(build_model("mnist-lite", 12), set.data, o);
  }();
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("sgba_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& leaf) const { return (path_ / leaf).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace sgba::testing
