#include "patchguard/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include "patchguard/error.hpp"

namespace patchguard {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace

std::uint8_t gray_level(float score) {
  const double s = std::clamp(static_cast<double>(score), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(s * 255.0 + 0.5));
}

GrayImage to_gray_image(const Grid2D<float>& scores) {
  GrayImage img(scores.height, scores.width);
  for (std::size_t i = 0; i < scores.size(); ++i) img.values[i] = gray_level(scores.values[i]);
  return img;
}

void write_png_gray(const std::filesystem::path& path, const GrayImage& image) {
  File file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                            png_warning_handler);
  if (!png) throw Error(ErrorKind::io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  if (!info) throw Error(ErrorKind::io, "png_create_info_struct failed");

  // libpng reports errors by longjmp back to this frame.
  if (setjmp(png_jmpbuf(png))) throw Error(ErrorKind::io, "libpng failed writing " + path.string());
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, image.values.data() + y * image.width);
  }
  png_write_end(png, nullptr);
}

GrayImage read_png_gray(const std::filesystem::path& path) {
  File file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw Error(ErrorKind::io, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                           png_warning_handler);
  if (!png) throw Error(ErrorKind::io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  if (!info) throw Error(ErrorKind::io, "png_create_info_struct failed");

  GrayImage img;
  if (setjmp(png_jmpbuf(png))) throw Error(ErrorKind::io, "libpng failed reading " + path.string());
  png_init_io(png, file.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    throw Error(ErrorKind::format, path.string() + " is not an 8-bit grayscale PNG");
  }
  img = GrayImage(png_get_image_height(png, info), png_get_image_width(png, info));
  for (std::size_t y = 0; y < img.height; ++y) png_read_row(png, img.values.data() + y * img.width, nullptr);
  png_read_end(png, nullptr);
  return img;
}

}  // namespace patchguard
