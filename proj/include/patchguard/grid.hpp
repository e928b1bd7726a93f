#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace patchguard {

// Dense row-major 2-D array. Used for raw score maps, anomaly maps and masks.
template <class T>
struct Grid2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Grid2D() = default;
  Grid2D(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  T& at(std::size_t y, std::size_t x) {
    assert(y < height && x < width);
    return values[y * width + x];
  }
  const T& at(std::size_t y, std::size_t x) const {
    assert(y < height && x < width);
    return values[y * width + x];
  }

  std::size_t size() const { return values.size(); }
  bool same_shape(const Grid2D& other) const {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

// Per-patch raw scores (NLL, higher = more anomalous).
using ScoreMap = Grid2D<double>;
// Binary ground truth, values 0/1.
using Mask = Grid2D<unsigned char>;

}  // namespace patchguard
