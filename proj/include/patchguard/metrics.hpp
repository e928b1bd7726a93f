#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "patchguard/grid.hpp"

namespace patchguard {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;  // 1 = positive (anomalous)
};

// Area under the ROC curve. Tied scores form one threshold group and are
// integrated by trapezoid, which makes this the Mann-Whitney statistic
// P(s+ > s-) + 0.5 P(s+ == s-). Throws undefined_metric unless both classes occur.
double auroc(const ScoredSet& set);

// Average precision: sum over descending thresholds of (R_i - R_{i-1}) P_i.
// Throws undefined_metric without positives.
double prauc(const ScoredSet& set);

// AUROC over the pooled pixels of all maps; masks give the pixel labels.
double pixel_auroc(std::span<const Grid2D<float>> maps, std::span<const Mask> masks);

// One 8-connected component of a mask, as sorted row-major pixel indices.
using Region = std::vector<std::size_t>;

// Components ordered by their first pixel in row-major order.
std::vector<Region> connected_components(const Mask& mask);

struct ProOptions {
  double max_fpr = 0.3;
  // Every distinct score is a threshold when there are at most this many,
  // otherwise a quantile grid of `grid_points` thresholds is used.
  std::size_t exact_limit = 4096;
  std::size_t grid_points = 512;
};

struct ProPoint {
  double fpr = 0.0;
  double pro = 0.0;
};

struct ProResult {
  double score = 0.0;               // normalized area in [0, 1]
  std::size_t threshold_count = 0;
  std::vector<ProPoint> curve;      // starts at (0, 0), ends at (1, 1)
};

// Per-region-overlap curve integrated up to `max_fpr` and divided by it.
// At each threshold t (descending) pixels with score >= t are positive; FPR is
// pooled over all negative pixels; PRO is the mean coverage over all regions.
// When a tie group raises FPR and PRO together, the curve rises first and then
// runs right (so a constant map scores 1). Integration is trapezoidal with
// linear interpolation at max_fpr.
ProResult pro_score(std::span<const Grid2D<float>> maps, std::span<const Mask> masks,
                    const ProOptions& options = {});

// Spearman rank correlation with average ranks for ties. Throws
// undefined_metric if either input is constant or shorter than 2.
double spearman(std::span<const double> a, std::span<const double> b);

struct MetricsReport {
  std::optional<double> image_auroc;
  std::optional<double> prauc;
  std::optional<double> pixel_auroc;
  std::optional<double> pro;
  std::size_t pro_thresholds = 0;
};

}  // namespace patchguard
