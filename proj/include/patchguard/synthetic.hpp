#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "patchguard/embeddings.hpp"

namespace patchguard {

// Toy patch-embedding dataset: every patch is drawn independently from a fixed
// diagonal Gaussian mixture. Anomalous test images carry a square block of
// patches shifted by `shift_sigmas` standard deviations (of the component the
// patch was drawn from) in every channel, and a mask covering that block.
struct ToyConfig {
  std::size_t dim = 16;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t n_train = 200;
  std::size_t n_test = 40;
  std::size_t n_anomalous = 20;  // of n_test
  std::size_t components = 3;
  std::size_t block = 3;
  double shift_sigmas = 4.0;
  double mean_spread = 2.0;          // component means ~ U(-spread, spread)
  double sigma_lo = 0.5, sigma_hi = 1.0;
  // Adds a second scale: 2x2 average pooling of the first.
  bool pooled_scale = false;
  std::uint64_t seed = 0;
};

struct ToyMixture {
  std::vector<double> weights;  // components
  std::vector<double> means;    // components x dim
  std::vector<double> sigmas;   // components x dim
};

ToyMixture make_toy_mixture(const ToyConfig& config);
EmbeddingDataset make_toy_dataset(const ToyConfig& config);

// Nearest-neighbour upscale of a patch-level block to the 224 x 224 mask.
Mask block_mask(std::size_t grid_h, std::size_t grid_w, std::size_t top, std::size_t left, std::size_t block);

}  // namespace patchguard
