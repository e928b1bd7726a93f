#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "patchguard/embeddings.hpp"
#include "patchguard/grid.hpp"

namespace patchguard {

// Per-pixel anomaly scores in [0, 1] at image resolution.
struct AnomalyMap {
  Grid2D<float> scores;
  float image_score = 0.0f;  // max over scores

  static AnomalyMap from_scores(Grid2D<float> scores);
};

// Min-max normalization of log-likelihoods over the whole set: with ll = -NLL,
// p = (ll - min) / (max - min) and the returned map holds a = 1 - p.
// A degenerate set (max == min) maps to all zeros.
std::vector<ScoreMap> normalize_batch(std::span<const ScoreMap> raw);

// Bilinear resize to target x target with half-pixel centres:
// src = (dst + 0.5) * (H / target) - 0.5, clamped to [0, H - 1].
ScoreMap upsample_bilinear(const ScoreMap& map, std::size_t target = kImageSize);

// Element-wise mean.
ScoreMap fuse_scales(std::span<const ScoreMap> maps);

enum class ThresholdKind { quantile, max };

struct ThresholdStrategy {
  ThresholdKind kind = ThresholdKind::quantile;
  double q = 0.99;
};

struct Threshold {
  double value = 0.0;
  ThresholdStrategy strategy;
  std::string source;
};

// Linear-interpolated empirical quantile (or max) of validation image scores.
Threshold select_threshold(std::span<const double> val_scores, ThresholdStrategy strategy,
                           std::string source = {});

// Anomalous iff score > threshold (strict).
Label classify(double image_score, const Threshold& threshold);

std::string to_string(const ThresholdStrategy& strategy);
ThresholdStrategy parse_threshold_strategy(const std::string& text);

// Full scoring pipeline for a set of images. raw[i][s] is image i's raw NLL
// map at scale s. Each scale is normalized over `group_size` consecutive
// images (0 = the whole set), upsampled, then the scales are averaged.
std::vector<AnomalyMap> build_anomaly_maps(const std::vector<std::vector<ScoreMap>>& raw,
                                           std::size_t group_size = 0,
                                           std::size_t target = kImageSize);

}  // namespace patchguard
