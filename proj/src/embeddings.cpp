#include "patchguard/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patchguard/binary_io.hpp"
#include "patchguard/error.hpp"
#include "patchguard/rng.hpp"

namespace patchguard {
namespace {

constexpr std::string_view kMagic = "PEA1";
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kMaskBytes = kImageSize * kImageSize;

std::string sample_label(const Sample& s, std::size_t index) {
  return s.id.empty() ? "#" + std::to_string(index) : "'" + s.id + "'";
}

void validate_sample(const Sample& s, std::size_t index, const std::vector<GridShape>& scales,
                     bool is_train) {
  const auto name = sample_label(s, index);
  if (s.grids.size() != scales.size()) {
    throw Error(ErrorKind::dimension_mismatch, "sample " + name + " has " +
                                                   std::to_string(s.grids.size()) + " grids, expected " +
                                                   std::to_string(scales.size()));
  }
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const auto& g = s.grids[k];
    if (g.shape() != scales[k] || g.data().size() != scales[k].size()) {
      throw Error(ErrorKind::dimension_mismatch, "sample " + name + " scale " + std::to_string(k) +
                                                     " is " + to_string(g.shape()) + ", expected " +
                                                     to_string(scales[k]));
    }
    if (!g.all_finite()) {
      throw Error(ErrorKind::non_finite_value,
                  "sample " + name + " scale " + std::to_string(k) + " contains NaN or Inf");
    }
  }
  if (s.mask) {
    if (s.mask->height != kImageSize || s.mask->width != kImageSize) {
      throw Error(ErrorKind::dimension_mismatch,
                  "sample " + name + " mask is " + std::to_string(s.mask->height) + "x" +
                      std::to_string(s.mask->width) + ", expected 224x224");
    }
    if (std::any_of(s.mask->values.begin(), s.mask->values.end(), [](auto v) { return v > 1; })) {
      throw Error(ErrorKind::invalid_sample, "sample " + name + " mask is not binary");
    }
  }
  if (is_train && (s.label != Label::normal || s.mask)) {
    throw Error(ErrorKind::invalid_sample,
                "train sample " + name + " must be normal and carry no mask");
  }
}

void encode_sample(binary::Writer& w, const Sample& s, std::uint8_t split_tag) {
  w.string(s.id);
  w.u8(split_tag);
  w.u8(static_cast<std::uint8_t>(s.label));
  w.u8(s.mask ? 1 : 0);
  for (const auto& g : s.grids) w.f32s(g.data());
  if (s.mask) {
    w.raw(std::as_bytes(std::span(s.mask->values)));
  }
}

}  // namespace

std::string to_string(const GridShape& shape) {
  return "(" + std::to_string(shape.height) + ", " + std::to_string(shape.width) + ", " +
         std::to_string(shape.channels) + ")";
}

PatchGrid::PatchGrid(GridShape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw Error(ErrorKind::dimension_mismatch, "grid " + to_string(shape_) + " needs " +
                                                   std::to_string(shape_.size()) + " values, got " +
                                                   std::to_string(data_.size()));
  }
}

bool PatchGrid::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void EmbeddingDataset::validate() const {
  if (meta.scales.empty()) throw Error(ErrorKind::dimension_mismatch, "dataset declares no scales");
  for (const auto& s : meta.scales) {
    if (s.height == 0 || s.width == 0 || s.channels == 0) {
      throw Error(ErrorKind::dimension_mismatch, "scale " + to_string(s) + " has a zero dimension");
    }
  }
  for (std::size_t i = 0; i < train.size(); ++i) validate_sample(train[i], i, meta.scales, true);
  for (std::size_t i = 0; i < test.size(); ++i) validate_sample(test[i], i, meta.scales, false);
}

std::vector<std::byte> encode_archive(const EmbeddingDataset& dataset) {
  binary::Writer w;
  w.magic(kMagic);
  w.u32(kVersion);
  w.string(dataset.meta.backbone);
  w.u32(static_cast<std::uint32_t>(dataset.meta.scales.size()));
  for (const auto& s : dataset.meta.scales) {
    w.u32(s.height);
    w.u32(s.width);
    w.u32(s.channels);
  }
  w.u32(static_cast<std::uint32_t>(dataset.train.size() + dataset.test.size()));
  for (const auto& s : dataset.train) encode_sample(w, s, 0);
  for (const auto& s : dataset.test) encode_sample(w, s, 1);
  return w.take();
}

EmbeddingDataset decode_archive(std::span<const std::byte> bytes) {
  binary::Reader r(bytes, ErrorKind::truncated_payload);
  if (bytes.size() < kMagic.size() || !r.magic(kMagic)) {
    throw Error(ErrorKind::corrupt_header, "missing PEA1 magic");
  }
  const auto version = r.u32("version");
  if (version != kVersion) {
    throw Error(ErrorKind::corrupt_header, "unsupported archive version " + std::to_string(version));
  }

  EmbeddingDataset ds;
  ds.meta.backbone = r.string("backbone name");
  const auto n_scales = r.u32("scale count");
  if (n_scales == 0) throw Error(ErrorKind::corrupt_header, "archive declares zero scales");
  r.require(std::size_t{n_scales} * 12, "scale table");
  std::size_t floats_per_sample = 0;
  for (std::uint32_t k = 0; k < n_scales; ++k) {
    GridShape s;
    s.height = r.u32();
    s.width = r.u32();
    s.channels = r.u32();
    if (s.height == 0 || s.width == 0 || s.channels == 0) {
      throw Error(ErrorKind::corrupt_header, "scale " + std::to_string(k) + " " + to_string(s) +
                                                 " has a zero dimension");
    }
    floats_per_sample += s.size();
    ds.meta.scales.push_back(s);
  }

  const auto n_samples = r.u32("sample count");
  // Each sample occupies at least its fixed fields plus the grid payload.
  const std::size_t min_sample_bytes = 4 + 3 + floats_per_sample * 4;
  if (r.remaining() / min_sample_bytes < n_samples) {
    throw Error(ErrorKind::truncated_payload,
                "archive declares " + std::to_string(n_samples) + " samples of at least " +
                    std::to_string(min_sample_bytes) + " bytes but only " +
                    std::to_string(r.remaining()) + " bytes remain");
  }

  for (std::uint32_t i = 0; i < n_samples; ++i) {
    Sample s;
    std::uint8_t split_tag = 0;
    try {
      s.id = r.string("sample id");
    } catch (const Error& e) {
      throw Error(e.kind(), "sample #" + std::to_string(i) + ": " + e.what());
    }
    const auto name = sample_label(s, i);
    try {
      split_tag = r.u8("split tag");
      const auto label = r.u8("label");
      const auto has_mask = r.u8("mask flag");
      if (split_tag > 1 || label > 1 || has_mask > 1) {
        throw Error(ErrorKind::corrupt_header, "bad tag bytes (split " + std::to_string(split_tag) +
                                                   ", label " + std::to_string(label) + ", mask " +
                                                   std::to_string(has_mask) + ")");
      }
      s.label = static_cast<Label>(label);
      for (const auto& shape : ds.meta.scales) {
        std::vector<float> data(shape.size());
        r.f32s(data, "grid payload");
        s.grids.emplace_back(shape, std::move(data));
      }
      if (has_mask) {
        auto raw = r.raw(kMaskBytes, "mask payload");
        Mask m(kImageSize, kImageSize);
        std::memcpy(m.values.data(), raw.data(), kMaskBytes);
        s.mask = std::move(m);
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "sample " + name + ": " + e.what());
    }
    validate_sample(s, i, ds.meta.scales, split_tag == 0);
    (split_tag == 0 ? ds.train : ds.test).push_back(std::move(s));
  }
  if (!r.at_end()) {
    throw Error(ErrorKind::dimension_mismatch,
                std::to_string(r.remaining()) + " trailing bytes after the declared samples");
  }
  return ds;
}

EmbeddingDataset load_archive(const std::filesystem::path& path) {
  return decode_archive(binary::read_file(path));
}

void write_archive(const EmbeddingDataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  binary::write_file(path, encode_archive(dataset));
}

std::uint64_t archive_hash(const std::filesystem::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::byte b : binary::read_file(path)) {
    h ^= static_cast<std::uint8_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t validation_count(std::size_t n, double train_fraction) {
  if (n < 2) return 0;
  auto val = static_cast<std::size_t>(std::llround((1.0 - train_fraction) * static_cast<double>(n)));
  return std::clamp<std::size_t>(val, 1, n - 1);
}

TrainValSplit split_train_val(std::span<const Sample> samples, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw Error(ErrorKind::invalid_config,
                "train fraction must lie in (0, 1), got " + std::to_string(spec.train_fraction));
  }
  const std::size_t n = samples.size();
  if (n < 2) {
    throw Error(ErrorKind::cannot_split,
                "need at least 2 samples for a train/validation split, got " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].label != Label::normal) {
      throw Error(ErrorKind::invalid_sample, "sample " + sample_label(samples[i], i) +
                                                 " is anomalous; only normal samples can be split");
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Xorshift64 rng(spec.seed);
  rng.shuffle(std::span(order));

  const std::size_t n_train = n - validation_count(n, spec.train_fraction);
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());

  TrainValSplit out;
  out.train.reserve(train_idx.size());
  out.val.reserve(val_idx.size());
  for (auto i : train_idx) out.train.push_back(samples[i]);
  for (auto i : val_idx) out.val.push_back(samples[i]);
  return out;
}

}  // namespace patchguard
