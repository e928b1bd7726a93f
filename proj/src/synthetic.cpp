#include "patchguard/synthetic.hpp"

#include <cstdio>
#include <string>

#include "patchguard/error.hpp"
#include "patchguard/rng.hpp"

namespace patchguard {
namespace {

std::size_t pick(Xorshift64& rng, const std::vector<double>& weights) {
  double u = rng.uniform();
  for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
    if (u < weights[k]) return k;
    u -= weights[k];
  }
  return weights.size() - 1;
}

PatchGrid pool2x2(const PatchGrid& g) {
  const std::size_t H = std::max<std::size_t>(1, g.height() / 2), W = std::max<std::size_t>(1, g.width() / 2);
  const std::size_t D = g.channels();
  PatchGrid out(GridShape{static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(W), static_cast<std::uint32_t>(D)});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      auto dst = out.patch(y, x);
      std::size_t n = 0;
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const std::size_t sy = 2 * y + dy, sx = 2 * x + dx;
          if (sy >= g.height() || sx >= g.width()) continue;
          const auto src = g.patch(sy, sx);
          for (std::size_t c = 0; c < D; ++c) dst[c] += src[c];
          ++n;
        }
      }
      for (auto& v : dst) v /= static_cast<float>(n);
    }
  }
  return out;
}

}  // namespace

ToyMixture make_toy_mixture(const ToyConfig& config) {
  // The mixture has its own stream so it stays fixed when sample counts change.
  Xorshift64 rng(config.seed ^ 0x6D69787475726531ULL);
  ToyMixture m;
  double total = 0.0;
  for (std::size_t k = 0; k < config.components; ++k) {
    m.weights.push_back(1.0 + rng.uniform());
    total += m.weights.back();
  }
  for (auto& w : m.weights) w /= total;
  for (std::size_t i = 0; i < config.components * config.dim; ++i) {
    m.means.push_back(rng.uniform(-config.mean_spread, config.mean_spread));
    m.sigmas.push_back(rng.uniform(config.sigma_lo, config.sigma_hi));
  }
  return m;
}

Mask block_mask(std::size_t grid_h, std::size_t grid_w, std::size_t top, std::size_t left, std::size_t block) {
  Mask mask(kImageSize, kImageSize, 0);
  for (std::size_t py = 0; py < kImageSize; ++py) {
    const std::size_t gy = py * grid_h / kImageSize;
    if (gy < top || gy >= top + block) continue;
    for (std::size_t px = 0; px < kImageSize; ++px) {
      const std::size_t gx = px * grid_w / kImageSize;
      if (gx >= left && gx < left + block) mask.at(py, px) = 1;
    }
  }
  return mask;
}

EmbeddingDataset make_toy_dataset(const ToyConfig& config) {
  if (config.dim == 0 || config.height == 0 || config.width == 0 || config.components == 0) {
    throw Error(ErrorKind::invalid_config, "toy dataset dimensions must be positive");
  }
  if (config.n_anomalous > config.n_test) {
    throw Error(ErrorKind::invalid_config, "more anomalous samples than test samples");
  }
  if (config.block > config.height || config.block > config.width) {
    throw Error(ErrorKind::invalid_config, "anomaly block larger than the grid");
  }
  const auto mixture = make_toy_mixture(config);
  const std::size_t D = config.dim;
  const GridShape shape{static_cast<std::uint32_t>(config.height), static_cast<std::uint32_t>(config.width),
                        static_cast<std::uint32_t>(D)};

  EmbeddingDataset ds;
  ds.meta.backbone = "toy-mixture";
  ds.meta.scales.push_back(shape);
  if (config.pooled_scale) {
    ds.meta.scales.push_back(GridShape{std::max<std::uint32_t>(1, shape.height / 2),
                                       std::max<std::uint32_t>(1, shape.width / 2), shape.channels});
  }

  Xorshift64 rng(config.seed);
  auto draw = [&](std::string id, bool anomalous) {
    Sample s;
    s.id = std::move(id);
    s.label = anomalous ? Label::anomalous : Label::normal;
    std::size_t top = 0, left = 0;
    if (anomalous) {
      top = rng.below(config.height - config.block + 1);
      left = rng.below(config.width - config.block + 1);
      s.mask = block_mask(config.height, config.width, top, left, config.block);
    }
    PatchGrid grid(shape);
    for (std::size_t y = 0; y < config.height; ++y) {
      for (std::size_t x = 0; x < config.width; ++x) {
        const std::size_t k = pick(rng, mixture.weights);
        const bool shifted = anomalous && y >= top && y < top + config.block && x >= left &&
                             x < left + config.block;
        auto patch = grid.patch(y, x);
        for (std::size_t c = 0; c < D; ++c) {
          const double sigma = mixture.sigmas[k * D + c];
          double v = mixture.means[k * D + c] + sigma * rng.normal();
          if (shifted) v += config.shift_sigmas * sigma;
          patch[c] = static_cast<float>(v);
        }
      }
    }
    if (config.pooled_scale) {
      auto pooled = pool2x2(grid);
      s.grids.push_back(std::move(grid));
      s.grids.push_back(std::move(pooled));
    } else {
      s.grids.push_back(std::move(grid));
    }
    return s;
  };

  char id[32];
  for (std::size_t i = 0; i < config.n_train; ++i) {
    std::snprintf(id, sizeof id, "train_%04zu", i);
    ds.train.push_back(draw(id, false));
  }
  // Test samples alternate normal / anomalous until the anomalous quota is met.
  std::size_t anomalous_left = config.n_anomalous;
  for (std::size_t i = 0; i < config.n_test; ++i) {
    const std::size_t remaining = config.n_test - i;
    const bool anomalous = anomalous_left > 0 && (anomalous_left >= remaining || i % 2 == 1);
    std::snprintf(id, sizeof id, "test_%04zu", i);
    ds.test.push_back(draw(id, anomalous));
    if (anomalous) --anomalous_left;
  }
  return ds;
}

}  // namespace patchguard
