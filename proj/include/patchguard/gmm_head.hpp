#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "patchguard/binary_io.hpp"
#include "patchguard/embeddings.hpp"
#include "patchguard/grid.hpp"

namespace patchguard {

struct GmmConfig {
  std::size_t dim = 0;
  std::size_t num_gaussians = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

// Offsets into the flat parameter vector. The order is also the checkpoint
// payload order: mixture-logit map, mean map, scale map, each weights
// (row-major [out][in]) followed by bias.
struct GmmLayout {
  std::size_t dim = 0;
  std::size_t k = 0;
  std::size_t pi_weight = 0, pi_bias = 0;
  std::size_t mu_weight = 0, mu_bias = 0;
  std::size_t sigma_weight = 0, sigma_bias = 0;
  std::size_t total = 0;

  GmmLayout(std::size_t dim, std::size_t k);
};

// 2 (D^2 K + K D) + (D K + K).
std::size_t gmm_parameter_count(std::size_t dim, std::size_t k);

// Mixture-density network: three linear maps from a patch embedding to the
// logits, means and log-scales of a diagonal Gaussian mixture over that same
// patch.
struct GmmHead {
  std::size_t dim = 0;
  std::size_t num_gaussians = 0;
  std::vector<double> params;

  GmmLayout layout() const { return {dim, num_gaussians}; }

  friend bool operator==(const GmmHead&, const GmmHead&) = default;
};

struct MixtureParams {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> pi;     // k
  std::vector<double> mu;     // k x dim
  std::vector<double> sigma;  // k x dim
};

inline constexpr double kSigmaMin = 1e-6;
inline constexpr double kSigmaMax = 1e6;

GmmHead init_gmm(const GmmConfig& config);

MixtureParams gmm_forward(const GmmHead& head, std::span<const double> patch);

// -log sum_k pi_k N(x; mu_k, diag sigma_k^2), evaluated with log-sum-exp.
double gmm_nll(const MixtureParams& params, std::span<const double> x);

// Gradient of the mean NLL over `batch` with respect to every parameter, laid
// out like GmmHead::params.
std::vector<double> gmm_grad(const GmmHead& head, std::span<const std::vector<double>> batch);

ScoreMap gmm_patch_scores(const GmmHead& head, const PatchGrid& grid);

// Training entry points over whole patch grids. The loss is the mean NLL over
// every patch of every grid; `grad` (same size as params) receives its gradient.
double gmm_mean_nll(const GmmHead& head, std::span<const PatchGrid* const> grids,
                    std::size_t threads = 1);
double gmm_loss_and_grad(const GmmHead& head, std::span<const PatchGrid* const> grids,
                         std::span<double> grad, std::size_t threads = 1);

// GMMH checkpoint record.
void write_gmm(binary::Writer& out, const GmmHead& head);
GmmHead read_gmm(binary::Reader& in);

}  // namespace patchguard
