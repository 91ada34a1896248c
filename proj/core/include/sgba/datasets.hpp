#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgba/common.hpp"

namespace sgba::data {

// Environment variable that overrides the configured dataset root.
inline constexpr const char* kDataRootEnv = "SGBA_DATA_ROOT";

struct DataOptions {
  std::string root = "data";  // config key `data_root`
  int synthetic_train = 3000;
  int synthetic_test = 1000;
};

// Resolves the on-disk root: the environment override wins over the configured value.
std::string resolve_data_root(const DataOptions& opts);

// Index-list view over immutable image sources. Splits are stored as indices so
// a manifest of (name, seed, indices) reproduces the exact batches.
struct DatasetHandle {
  std::string name;
  Shape input_shape;
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::shared_ptr<const LabeledImages> train_source;
  std::shared_ptr<const LabeledImages> test_source;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;

  LabeledImages train() const { return train_source->subset(train_indices); }
  LabeledImages test() const { return test_source->subset(test_indices); }
  std::vector<int> train_labels() const;
  std::vector<std::size_t> class_counts() const;
};

std::vector<std::string> registered_datasets();
Shape registered_shape(const std::string& name);
int registered_classes(const std::string& name);

// Loads a registered dataset ("mnist", "cifar10", "gtsrb") or "synthetic".
// subsample_fraction in (0,1] keeps a class-stratified part of the train split.
DatasetHandle load_dataset(const std::string& name, std::uint64_t seed, double subsample_fraction,
                           const DataOptions& opts = {});

// Class-stratified clean subset of `handle`'s train split, 0 < fraction <= 0.1.
DatasetHandle defender_holdout(const DatasetHandle& handle, double fraction);

// `handle` with every train index present in `removed` dropped.
DatasetHandle without(const DatasetHandle& handle, const DatasetHandle& removed);

// Stratified selection: per class, keeps fraction*count samples (largest-remainder
// rounding so the total is round(fraction*n)); deterministic in seed.
std::vector<std::size_t> stratified_select(const std::vector<int>& labels,
                                           const std::vector<std::size_t>& candidates,
                                           double fraction, std::uint64_t seed);

nlohmann::json split_manifest(const DatasetHandle& handle);
DatasetHandle from_split_manifest(const nlohmann::json& manifest, const DataOptions& opts = {});

// Synthetic fixture: class-conditional geometric shapes on noise, 28x28x1, 10 classes.
LabeledImages make_synthetic(int count, std::uint64_t seed);

// Readers for the on-disk formats (exposed for tests).
LabeledImages read_idx(const std::string& images_path, const std::string& labels_path);
LabeledImages read_cifar_batches(const std::vector<std::string>& paths);
std::vector<float> resize_bilinear(const std::vector<float>& src, Shape from, Shape to);

}  // namespace sgba::data
