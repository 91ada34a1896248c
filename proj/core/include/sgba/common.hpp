#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sgba {

// Error categories surface in the CLI's machine-readable error JSON.
enum class ErrorCode {
  kInvalidArgument,
  kNotFound,
  kDataUnavailable,
  kShapeMismatch,
  kDivergence,
  kInfeasible,
  kConfigMismatch,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return pixels() * channels; }
  bool operator==(const Shape&) const = default;
};

// Axis-aligned pixel rectangle, half-open: rows [row, row + height).
struct Rect {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  int area() const { return height * width; }
  bool empty() const { return height <= 0 || width <= 0; }
  bool contains(int r, int c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
  bool inside(const Shape& s) const {
    return row >= 0 && col >= 0 && row + height <= s.height && col + width <= s.width;
  }
  bool intersects(const Rect& o) const {
    return row < o.row + o.height && o.row < row + height && col < o.col + o.width &&
           o.col < col + width;
  }
  bool operator==(const Rect&) const = default;
};

Rect bounding_union(const Rect& a, const Rect& b);

// A flat collection of images stored HWC per image, pixels in [0,1].
struct LabeledImages {
  Shape shape;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::span<const float> image(std::size_t i) const {
    return {pixels.data() + i * shape.size(), shape.size()};
  }
  std::span<float> image(std::size_t i) { return {pixels.data() + i * shape.size(), shape.size()}; }
  void push_back(std::span<const float> img, int label);
  LabeledImages subset(std::span<const std::size_t> indices) const;
};

// 64-bit FNV-1a; stable across platforms, used for config and artifact hashes.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::span<const float> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// Derives an independent child seed; keeps per-model streams decorrelated.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace sgba
