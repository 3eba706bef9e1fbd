#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "relprop/tensor.hpp"

namespace relprop {

// 8-bit image, interleaved row-major; 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::int64_t channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::int64_t y, std::int64_t x, std::int64_t c) {
    return pixels[(y * w + x) * channels + c];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x, std::int64_t c) const {
    return pixels[(y * w + x) * channels + c];
  }
};

// PNG decode; palette and sub-byte images are expanded, 16-bit depth and
// alpha are stripped, so the result is always Gray8 or RGB8.
ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& img);

// [0,255] bytes to a (1,C,H,W) tensor in [0,1] and back (values clamped).
Tensor image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor& t);

}  // namespace relprop
