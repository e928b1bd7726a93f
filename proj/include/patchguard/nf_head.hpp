#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "patchguard/binary_io.hpp"
#include "patchguard/embeddings.hpp"
#include "patchguard/grid.hpp"

namespace patchguard {

struct FlowConfig {
  std::size_t dim = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_steps = 20;
  float hidden_ratio = 0.16f;
  float clamp_alpha = 1.9f;
  std::uint64_t seed = 0;
  // Kernel sizes for steps 1, 3, 5, ... and 2, 4, 6, ... (1-based).
  std::size_t odd_step_kernel = 3;
  std::size_t even_step_kernel = 1;

  void validate() const;
  // round(hidden_ratio * dim), at least 1.
  std::size_t hidden() const;
  std::size_t kernel_for_step(std::size_t step_index) const;  // 0-based index

  friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

// Per-step parameter block, contiguous in FlowHead::params, in this order:
//   conv1 weight [hidden][D/2][k][k], conv1 bias [hidden],
//   conv2 weight [D][hidden][k][k],   conv2 bias [D].
// conv2 output channels 0..D/2-1 are the log-scale s, D/2..D-1 the shift t.
struct FlowStep {
  std::size_t kernel = 1;
  std::vector<std::uint32_t> permutation;  // y[c] = x[permutation[c]]
  std::size_t offset = 0;                  // into FlowHead::params

  friend bool operator==(const FlowStep&, const FlowStep&) = default;
};

std::size_t flow_step_parameter_count(std::size_t dim, std::size_t hidden, std::size_t kernel);

struct FlowHead {
  FlowConfig config;
  std::vector<FlowStep> steps;
  std::vector<double> params;

  std::size_t parameter_count() const { return params.size(); }

  friend bool operator==(const FlowHead&, const FlowHead&) = default;
};

// H x W x D array of f64 values, row-major (h, w, c).
struct DenseGrid {
  GridShape shape;
  std::vector<double> values;

  static DenseGrid from(const PatchGrid& grid);
  PatchGrid to_patch_grid() const;
};

struct FlowOutput {
  DenseGrid z;
  ScoreMap logdet;  // per-location accumulated log|det J|
};

FlowHead init_flow(const FlowConfig& config);

FlowOutput flow_forward(const FlowHead& head, const PatchGrid& grid);
// Smallest |pre-activation| of any subnet rectifier during a forward pass.
double flow_relu_margin(const FlowHead& head, const PatchGrid& grid);
FlowOutput flow_forward(const FlowHead& head, const DenseGrid& grid);
DenseGrid flow_inverse(const FlowHead& head, const DenseGrid& z);

// Per location: 0.5 |z|^2 + (D/2) ln(2 pi) - logdet.
ScoreMap flow_nll(const FlowOutput& output);

// Gradient of the mean per-patch NLL over the batch with respect to
// FlowHead::params. Permutations are fixed and carry no gradient.
std::vector<double> flow_grad(const FlowHead& head, std::span<const PatchGrid> batch);

double flow_mean_nll(const FlowHead& head, std::span<const PatchGrid* const> grids,
                     std::size_t threads = 1);
double flow_loss_and_grad(const FlowHead& head, std::span<const PatchGrid* const> grids,
                          std::span<double> grad, std::size_t threads = 1);

// NFH1 checkpoint record.
void write_flow(binary::Writer& out, const FlowHead& head);
FlowHead read_flow(binary::Reader& in);

}  // namespace patchguard
