#pragma once

// Minimal CPU convolutional network engine: sequential conv/pool/linear stacks with
// forward, backward (weights and/or input), softmax cross-entropy and Adam.
//
// Activations are kept channel-major over the whole batch, [C][N][H][W], so each
// convolution is a single GEMM against an im2col buffer. Parameters use the
// PyTorch layouts: conv weight [F][C][K][K], linear weight [O][I].

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgba/common.hpp"

namespace sgba::nn {

enum class LayerKind { kConv2d, kMaxPool, kLinear };
enum class Activation { kNone, kRelu, kSoftmax };
enum class Padding { kValid, kSame };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv2d;
  int filters = 0;  // output channels for conv, units for linear
  int kernel = 0;
  int stride = 1;
  Padding padding = Padding::kValid;
  Activation activation = Activation::kNone;
  bool dropout = false;  // "*" in the architecture tables

  bool operator==(const LayerSpec&) const = default;
};

struct ArchitectureId {
  std::string name;
  Shape input;
  std::vector<LayerSpec> layers;
  float dropout_rate = 0.5f;

  int num_classes() const;
  // Names of parameterized layers in order, e.g. conv1, conv2, fc, output.
  std::vector<std::string> parameter_layer_names() const;
};

// Registered architectures: "mnist", "cifar10", "gtsrb" and the desk-scale "mnist-lite".
const ArchitectureId& find_architecture(const std::string& name);
std::vector<std::string> registered_architectures();

struct LayerParams {
  std::string name;
  std::vector<int> weight_dims;
  std::vector<float> weight;
  std::vector<float> bias;
};

using Params = std::vector<LayerParams>;

// Fresh parameters in the PyTorch default range U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Params init_params(const ArchitectureId& arch, std::uint64_t seed);

// Same structure as `like`, all zeros.
Params zeros_like(const Params& like);

enum class Mode { kInference, kTrain };

class Network {
 public:
  explicit Network(const ArchitectureId& arch);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  const ArchitectureId& arch() const;

  // `inputs` holds `batch` images in HWC layout. Returns logits [classes][batch].
  // In kTrain mode dropout masks are drawn from `rng`.
  std::span<const float> forward(std::span<const float> inputs, int batch, const Params& params,
                                 Mode mode = Mode::kInference, std::mt19937_64* rng = nullptr);

  // Backpropagates d(loss)/d(logits) ([classes][batch]) through the last forward pass.
  // Either output may be null; weight gradients are accumulated into `grads`,
  // the input gradient is written HWC per image into `input_grad`.
  void backward(std::span<const float> logits_grad, const Params& params, Params* grads,
                std::vector<float>* input_grad);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Mean softmax cross-entropy over the batch. Writes d(loss)/d(logits) if requested.
double softmax_cross_entropy(std::span<const float> logits, int classes, int batch,
                             std::span<const int> targets, std::vector<float>* logits_grad);

// Softmax probabilities [classes][batch] from logits.
std::vector<float> softmax(std::span<const float> logits, int classes, int batch);

// Top-1 predictions per batch column.
std::vector<int> argmax_columns(std::span<const float> logits, int classes, int batch);

class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options opts) : opts_(opts) {}

  // One update of `values` against `grads`; buffer i is tracked by position.
  void step(std::span<const std::span<float>> values, std::span<const std::span<const float>> grads);
  void step(Params& params, const Params& grads);

  const Options& options() const { return opts_; }
  std::int64_t steps() const { return t_; }

 private:
  Options opts_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace sgba::nn
