#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgba/common.hpp"

namespace sgba::png {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kGrey{160, 160, 160};
inline constexpr Rgb kBlue{40, 90, 200};
inline constexpr Rgb kRed{210, 50, 40};

// 8-bit PNG bytes for `channels` in {1, 3}, rows top to bottom.
std::vector<std::uint8_t> encode(int width, int height, int channels, std::span<const std::uint8_t> pixels);
void write(const std::string& path, int width, int height, int channels, std::span<const std::uint8_t> pixels);

class Canvas {
 public:
  Canvas(int width, int height, Rgb background = kWhite);

  int width() const { return width_; }
  int height() const { return height_; }
  const std::vector<std::uint8_t>& pixels() const { return px_; }

  void set(int x, int y, Rgb c);  // out-of-range coordinates are ignored
  void fill_rect(int x, int y, int w, int h, Rgb c);
  void line(int x0, int y0, int x1, int y1, Rgb c);
  void dot(int x, int y, int radius, Rgb c);
  // Copies a [0,1] HWC image scaled up by an integer factor.
  void blit(std::span<const float> image, Shape shape, int x, int y, int scale);
  void save(const std::string& path) const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> px_;
};

// Grid of the selected images, `cols` per row, each scaled by `scale`.
void save_image_grid(const LabeledImages& images, const std::vector<std::size_t>& indices, int cols,
                     int scale, const std::string& path);

// Single-channel mask in [0,1] rendered as a grey-level image.
void save_mask(std::span<const float> mask, Shape shape, int scale, const std::string& path);

}  // namespace sgba::png
