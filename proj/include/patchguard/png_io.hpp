#pragma once

#include <cstdint>
#include <filesystem>

#include "patchguard/grid.hpp"

namespace patchguard {

using GrayImage = Grid2D<std::uint8_t>;

// round(score * 255) with halves rounded up; scores are clamped to [0, 1].
std::uint8_t gray_level(float score);
GrayImage to_gray_image(const Grid2D<float>& scores);

// 8-bit single-channel PNG.
void write_png_gray(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_png_gray(const std::filesystem::path& path);

}  // namespace patchguard
