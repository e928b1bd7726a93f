#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "patchguard/grid.hpp"

namespace patchguard {

// Working resolution of every mask and anomaly map.
inline constexpr std::size_t kImageSize = 224;

struct GridShape {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;

  std::size_t patches() const { return std::size_t{height} * width; }
  std::size_t size() const { return patches() * channels; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

std::string to_string(const GridShape& shape);

// One image's H x W x D patch embeddings, row-major (h, w, c).
class PatchGrid {
 public:
  PatchGrid() = default;
  PatchGrid(GridShape shape, std::vector<float> data);
  explicit PatchGrid(GridShape shape) : shape_(shape), data_(shape.size(), 0.0f) {}

  const GridShape& shape() const { return shape_; }
  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t channels() const { return shape_.channels; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::span<const float> patch(std::size_t y, std::size_t x) const {
    return std::span<const float>(data_).subspan((y * shape_.width + x) * shape_.channels,
                                                 shape_.channels);
  }
  std::span<float> patch(std::size_t y, std::size_t x) {
    return std::span<float>(data_).subspan((y * shape_.width + x) * shape_.channels,
                                           shape_.channels);
  }

  bool all_finite() const;

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;

 private:
  GridShape shape_;
  std::vector<float> data_;
};

enum class Label : std::uint8_t { normal = 0, anomalous = 1 };

struct Sample {
  std::string id;
  std::vector<PatchGrid> grids;  // one per archive scale
  Label label = Label::normal;
  std::optional<Mask> mask;      // kImageSize x kImageSize when present

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DatasetMeta {
  std::string backbone;
  std::size_t image_size = kImageSize;
  std::vector<GridShape> scales;

  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct EmbeddingDataset {
  DatasetMeta meta;
  std::vector<Sample> train;  // normal only
  std::vector<Sample> test;

  // Throws Error naming the first offending sample.
  void validate() const;

  friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;
};

struct SplitSpec {
  std::uint64_t seed = 0;
  double train_fraction = 0.8;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

// PEA1 archive codec. The byte-level functions exist so corrupt inputs can be
// exercised without touching the filesystem.
std::vector<std::byte> encode_archive(const EmbeddingDataset& dataset);
EmbeddingDataset decode_archive(std::span<const std::byte> bytes);

EmbeddingDataset load_archive(const std::filesystem::path& path);
void write_archive(const EmbeddingDataset& dataset, const std::filesystem::path& path);

// FNV-1a over the archive file bytes; recorded in run metadata.
std::uint64_t archive_hash(const std::filesystem::path& path);

struct TrainValSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

// Seeded shuffled-index prefix split. Both parts keep the input order.
TrainValSplit split_train_val(std::span<const Sample> samples, const SplitSpec& spec);

// Number of validation samples split_train_val produces for n inputs.
std::size_t validation_count(std::size_t n, double train_fraction);

}  // namespace patchguard
