#include "patchguard/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patchguard/error.hpp"

namespace patchguard {
namespace {

void check_set(const ScoredSet& set) {
  if (set.scores.size() != set.labels.size()) {
    throw Error(ErrorKind::dimension_mismatch, "scores and labels differ in length");
  }
}

// Indices sorted by descending score.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return order;
}

void check_maps(std::span<const Grid2D<float>> maps, std::span<const Mask> masks) {
  if (maps.size() != masks.size()) {
    throw Error(ErrorKind::dimension_mismatch, std::to_string(maps.size()) + " maps but " +
                                                   std::to_string(masks.size()) + " masks");
  }
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].height != masks[i].height || maps[i].width != masks[i].width) {
      throw Error(ErrorKind::dimension_mismatch, "map " + std::to_string(i) + " and its mask differ in shape");
    }
  }
}

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
  std::size_t find(std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

double auroc(const ScoredSet& set) {
  check_set(set);
  const auto positives = static_cast<double>(std::count(set.labels.begin(), set.labels.end(), 1));
  const auto negatives = static_cast<double>(set.labels.size()) - positives;
  if (positives == 0 || negatives == 0) {
    throw Error(ErrorKind::undefined_metric, "AUROC needs both positive and negative samples");
  }
  const auto order = descending(set.scores);
  double tp = 0, fp = 0, area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = set.scores[order[i]];
    double dtp = 0, dfp = 0;
    for (; i < order.size() && set.scores[order[i]] == s; ++i) {
      (set.labels[order[i]] ? dtp : dfp) += 1;
    }
    area += dfp * (tp + 0.5 * dtp);
    tp += dtp;
    fp += dfp;
  }
  return area / (positives * negatives);
}

double prauc(const ScoredSet& set) {
  check_set(set);
  const auto positives = static_cast<double>(std::count(set.labels.begin(), set.labels.end(), 1));
  if (positives == 0) throw Error(ErrorKind::undefined_metric, "PRAUC needs at least one positive sample");
  const auto order = descending(set.scores);
  double tp = 0, fp = 0, recall_prev = 0, ap = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = set.scores[order[i]];
    for (; i < order.size() && set.scores[order[i]] == s; ++i) {
      (set.labels[order[i]] ? tp : fp) += 1;
    }
    const double recall = tp / positives;
    if (recall > recall_prev) {
      ap += (recall - recall_prev) * (tp / (tp + fp));
      recall_prev = recall;
    }
  }
  return ap;
}

double pixel_auroc(std::span<const Grid2D<float>> maps, std::span<const Mask> masks) {
  check_maps(maps, masks);
  ScoredSet pooled;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    pooled.scores.insert(pooled.scores.end(), maps[i].values.begin(), maps[i].values.end());
    pooled.labels.insert(pooled.labels.end(), masks[i].values.begin(), masks[i].values.end());
  }
  return auroc(pooled);
}

std::vector<Region> connected_components(const Mask& mask) {
  const std::size_t H = mask.height, W = mask.width;
  DisjointSet sets(H * W);
  // Union with the already-visited 8-neighbours (W, NW, N, NE).
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!mask.at(y, x)) continue;
      const std::size_t here = y * W + x;
      if (x > 0 && mask.at(y, x - 1)) sets.unite(here, here - 1);
      if (y > 0) {
        if (x > 0 && mask.at(y - 1, x - 1)) sets.unite(here, here - W - 1);
        if (mask.at(y - 1, x)) sets.unite(here, here - W);
        if (x + 1 < W && mask.at(y - 1, x + 1)) sets.unite(here, here - W + 1);
      }
    }
  }
  // Union keeps the smallest index as root, which is the first pixel in
  // row-major order, so regions come out in first-pixel order.
  std::vector<Region> regions;
  std::vector<std::size_t> region_of(H * W, 0);
  for (std::size_t i = 0; i < H * W; ++i) {
    if (!mask.values[i]) continue;
    const std::size_t root = sets.find(i);
    if (root == i) {
      region_of[i] = regions.size();
      regions.emplace_back();
    }
    regions[region_of[root]].push_back(i);
  }
  return regions;
}

ProResult pro_score(std::span<const Grid2D<float>> maps, std::span<const Mask> masks,
                    const ProOptions& options) {
  check_maps(maps, masks);
  if (!(options.max_fpr > 0.0 && options.max_fpr <= 1.0)) {
    throw Error(ErrorKind::invalid_config, "PRO max FPR must lie in (0, 1]");
  }

  // Pool pixels: score plus owning region (or none for negatives).
  constexpr std::size_t kNegative = static_cast<std::size_t>(-1);
  std::vector<double> scores;
  std::vector<std::size_t> owner;
  std::vector<double> region_size;
  std::size_t negatives = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const std::size_t base = scores.size();
    scores.insert(scores.end(), maps[i].values.begin(), maps[i].values.end());
    owner.resize(scores.size(), kNegative);
    for (const auto& region : connected_components(masks[i])) {
      for (auto p : region) owner[base + p] = region_size.size();
      region_size.push_back(static_cast<double>(region.size()));
    }
  }
  for (auto o : owner) negatives += o == kNegative;
  if (region_size.empty()) throw Error(ErrorKind::undefined_metric, "PRO needs at least one anomalous region");
  if (negatives == 0) throw Error(ErrorKind::undefined_metric, "PRO needs at least one negative pixel");

  const auto order = descending(scores);

  // Thresholds, descending.
  std::vector<double> thresholds;
  for (auto idx : order) {
    if (thresholds.empty() || scores[idx] != thresholds.back()) thresholds.push_back(scores[idx]);
  }
  if (thresholds.size() > options.exact_limit && options.grid_points >= 2) {
    const std::size_t n = order.size();
    std::vector<double> grid;
    for (std::size_t j = 0; j < options.grid_points; ++j) {
      // Quantile level j / (G - 1) of the ascending scores.
      const std::size_t rank = j * (n - 1) / (options.grid_points - 1);
      const double v = scores[order[n - 1 - rank]];
      if (grid.empty() || v != grid.back()) grid.push_back(v);
    }
    std::sort(grid.begin(), grid.end(), std::greater<>());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    thresholds = std::move(grid);
  }

  const double n_regions = static_cast<double>(region_size.size());
  std::vector<double> covered(region_size.size(), 0.0);
  double fp = 0;
  ProResult result;
  result.threshold_count = thresholds.size();
  result.curve.push_back({0.0, 0.0});
  std::size_t next = 0;
  for (double t : thresholds) {
    for (; next < order.size() && scores[order[next]] >= t; ++next) {
      const auto o = owner[order[next]];
      if (o == kNegative) {
        fp += 1;
      } else {
        covered[o] += 1;
      }
    }
    double pro = 0.0;
    for (std::size_t r = 0; r < covered.size(); ++r) pro += covered[r] / region_size[r];
    pro /= n_regions;
    const double fpr = fp / static_cast<double>(negatives);
    const auto& last = result.curve.back();
    if (pro != last.pro) result.curve.push_back({last.fpr, pro});
    if (fpr != result.curve.back().fpr) result.curve.push_back({fpr, pro});
  }

  double area = 0.0;
  for (std::size_t i = 1; i < result.curve.size(); ++i) {
    const auto a = result.curve[i - 1], b = result.curve[i];
    if (a.fpr >= options.max_fpr) break;
    if (b.fpr <= options.max_fpr) {
      area += (b.fpr - a.fpr) * 0.5 * (a.pro + b.pro);
    } else {
      const double w = (options.max_fpr - a.fpr) / (b.fpr - a.fpr);
      const double pro_at = a.pro + w * (b.pro - a.pro);
      area += (options.max_fpr - a.fpr) * 0.5 * (a.pro + pro_at);
      break;
    }
  }
  result.score = area / options.max_fpr;
  return result;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::dimension_mismatch, "rank correlation inputs differ in length");
  if (a.size() < 2) throw Error(ErrorKind::undefined_metric, "rank correlation needs at least two points");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0 || sbb == 0) throw Error(ErrorKind::undefined_metric, "rank correlation of a constant series");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace patchguard
