#include "relprop/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "relprop/errors.hpp"

namespace relprop {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw DataError("cannot open image '" + path.string() + "'");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("failed to decode PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_read_png(png, info,
               PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_STRIP_ALPHA |
                   PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND,
               nullptr);

  ImageU8 out;
  out.h = png_get_image_height(png, info);
  out.w = png_get_image_width(png, info);
  out.channels = png_get_channels(png, info);
  if (out.channels != 1 && out.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unsupported channel count in '" + path.string() + "'");
  }
  out.pixels.resize(static_cast<std::size_t>(out.h * out.w * out.channels));
  png_bytepp rows = png_get_rows(png, info);
  const std::size_t row_bytes = static_cast<std::size_t>(out.w * out.channels);
  for (std::int64_t y = 0; y < out.h; ++y) {
    std::copy_n(rows[y], row_bytes, out.pixels.data() + y * row_bytes);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("write_png supports 1 or 3 channels");
  }
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw DataError("cannot create image '" + path.string() + "'");

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
               static_cast<png_uint_32>(img.h), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  const std::size_t row_bytes = static_cast<std::size_t>(img.w * img.channels);
  for (std::int64_t y = 0; y < img.h; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * row_bytes);
  }
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor image_to_tensor(const ImageU8& img) {
  Tensor t(Shape4{1, img.channels, img.h, img.w});
  for (std::int64_t c = 0; c < img.channels; ++c) {
    for (std::int64_t y = 0; y < img.h; ++y) {
      for (std::int64_t x = 0; x < img.w; ++x) {
        t.at(0, c, y, x) = img.at(y, x, c) / 255.0;
      }
    }
  }
  return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
  const Shape4& s = t.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw ShapeError("tensor_to_image expects (1,1,H,W) or (1,3,H,W), got " +
                     s.str());
  }
  ImageU8 img;
  img.h = s.h;
  img.w = s.w;
  img.channels = s.c;
  img.pixels.resize(static_cast<std::size_t>(s.c * s.h * s.w));
  for (std::int64_t c = 0; c < s.c; ++c) {
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        const double v = std::clamp(t.at(0, c, y, x), 0.0, 1.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

}  // namespace relprop
