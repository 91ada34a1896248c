#include "sgba/common.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

namespace sgba {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kDataUnavailable: return "data_unavailable";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kInfeasible: return "infeasible";
    case ErrorCode::kConfigMismatch: return "config_mismatch";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

Rect bounding_union(const Rect& a, const Rect& b) {
  const int r0 = std::min(a.row, b.row);
  const int c0 = std::min(a.col, b.col);
  const int r1 = std::max(a.row + a.height, b.row + b.height);
  const int c1 = std::max(a.col + a.width, b.col + b.width);
  return {r0, c0, r1 - r0, c1 - c0};
}

void LabeledImages::push_back(std::span<const float> img, int label) {
  if (img.size() != shape.size()) {
    throw Error(ErrorCode::kShapeMismatch, "image size does not match collection shape");
  }
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  out.shape = shape;
  out.pixels.reserve(indices.size() * shape.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw Error(ErrorCode::kInvalidArgument, "subset index out of range");
    out.push_back(image(i), labels[i]);
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::span<const float> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (float v : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int k = 0; k < 4; ++k) {
      h ^= (bits >> (8 * k)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer over the combined word
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace sgba
