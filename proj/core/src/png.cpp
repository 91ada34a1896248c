#include "sgba/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace sgba::png {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

}  // namespace

std::vector<std::uint8_t> encode(int width, int height, int channels, std::span<const std::uint8_t> pixels) {
  if (width <= 0 || height <= 0 || (channels != 1 && channels != 3)) {
    throw Error(ErrorCode::kInvalidArgument, "png: bad image geometry");
  }
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  if (pixels.size() != stride * height) throw Error(ErrorCode::kShapeMismatch, "png: pixel buffer size");
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * height);
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), pixels.begin() + y * stride, pixels.begin() + (y + 1) * stride);
  }
  uLongf zsize = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zsize);
  if (compress2(z.data(), &zsize, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw Error(ErrorCode::kIo, "png: deflate failed");
  }
  z.resize(zsize);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                       // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);   // color type
  ihdr.insert(ihdr.end(), {0, 0, 0});      // compression, filter, interlace
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", z);
  chunk(out, "IEND", {});
  return out;
}

void write(const std::string& path, int width, int height, int channels, std::span<const std::uint8_t> pixels) {
  const auto bytes = encode(width, height, channels, pixels);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Canvas::Canvas(int width, int height, Rgb bg) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::kInvalidArgument, "canvas size must be positive");
  px_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < px_.size(); i += 3) {
    px_[i] = bg.r;
    px_[i + 1] = bg.g;
    px_[i + 2] = bg.b;
  }
}

void Canvas::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  px_[i] = c.r;
  px_[i + 1] = c.g;
  px_[i + 2] = c.b;
}

void Canvas::fill_rect(int x, int y, int w, int h, Rgb c) {
  for (int yy = y; yy < y + h; ++yy) {
    for (int xx = x; xx < x + w; ++xx) set(xx, yy, c);
  }
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::dot(int x, int y, int radius, Rgb c) {
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) set(x + dx, y + dy, c);
    }
  }
}

void Canvas::blit(std::span<const float> image, Shape shape, int x, int y, int scale) {
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      const std::size_t p = (static_cast<std::size_t>(r) * shape.width + c) * shape.channels;
      Rgb col;
      if (shape.channels >= 3) {
        col = {to_byte(image[p]), to_byte(image[p + 1]), to_byte(image[p + 2])};
      } else {
        const auto v = to_byte(image[p]);
        col = {v, v, v};
      }
      fill_rect(x + c * scale, y + r * scale, scale, scale, col);
    }
  }
}

void Canvas::save(const std::string& path) const { write(path, width_, height_, 3, px_); }

void save_image_grid(const LabeledImages& images, const std::vector<std::size_t>& indices, int cols, int scale,
                     const std::string& path) {
  if (indices.empty() || cols <= 0 || scale <= 0) throw Error(ErrorCode::kInvalidArgument, "empty image grid");
  const int n = static_cast<int>(indices.size());
  const int rows = (n + cols - 1) / cols;
  const int cw = images.shape.width * scale + 2, ch = images.shape.height * scale + 2;
  Canvas canvas(std::min(n, cols) * cw, rows * ch, kGrey);
  for (int k = 0; k < n; ++k) {
    canvas.blit(images.image(indices[k]), images.shape, (k % cols) * cw + 1, (k / cols) * ch + 1, scale);
  }
  canvas.save(path);
}

void save_mask(std::span<const float> mask, Shape shape, int scale, const std::string& path) {
  Canvas canvas(shape.width * scale, shape.height * scale);
  canvas.blit(mask, {shape.height, shape.width, 1}, 0, 0, scale);
  canvas.save(path);
}

}  // namespace sgba::png
