#include "patchguard/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "patchguard/error.hpp"

namespace patchguard {

AnomalyMap AnomalyMap::from_scores(Grid2D<float> scores) {
  AnomalyMap m;
  m.scores = std::move(scores);
  m.image_score = m.scores.values.empty()
                      ? 0.0f
                      : *std::max_element(m.scores.values.begin(), m.scores.values.end());
  return m;
}

std::vector<ScoreMap> normalize_batch(std::span<const ScoreMap> raw) {
  if (raw.empty()) return {};
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& m : raw) {
    for (double nll : m.values) {
      if (!std::isfinite(nll)) throw Error(ErrorKind::non_finite_value, "raw score map contains NaN or Inf");
      const double ll = -nll;
      lo = std::min(lo, ll);
      hi = std::max(hi, ll);
    }
  }
  std::vector<ScoreMap> out;
  out.reserve(raw.size());
  const double range = hi - lo;
  for (const auto& m : raw) {
    ScoreMap a(m.height, m.width, 0.0);
    if (range > 0.0) {
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double p = (-m.values[i] - lo) / range;
        a.values[i] = 1.0 - p;
      }
    }
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double frac;
};

std::vector<Tap> taps(std::size_t src, std::size_t dst) {
  std::vector<Tap> out(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  const double top = static_cast<double>(src - 1);
  for (std::size_t i = 0; i < dst; ++i) {
    const double s = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, top);
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, src - 1);
    out[i] = {i0, i1, s - static_cast<double>(i0)};
  }
  return out;
}

}  // namespace

ScoreMap upsample_bilinear(const ScoreMap& map, std::size_t target) {
  if (map.height == 0 || map.width == 0) {
    throw Error(ErrorKind::dimension_mismatch, "cannot upsample an empty map");
  }
  const auto ty = taps(map.height, target);
  const auto tx = taps(map.width, target);
  ScoreMap out(target, target);
  for (std::size_t y = 0; y < target; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < target; ++x) {
      const auto& b = tx[x];
      const double top = map.at(a.i0, b.i0) + b.frac * (map.at(a.i0, b.i1) - map.at(a.i0, b.i0));
      const double bottom = map.at(a.i1, b.i0) + b.frac * (map.at(a.i1, b.i1) - map.at(a.i1, b.i0));
      out.at(y, x) = top + a.frac * (bottom - top);
    }
  }
  return out;
}

ScoreMap fuse_scales(std::span<const ScoreMap> maps) {
  if (maps.empty()) throw Error(ErrorKind::dimension_mismatch, "no maps to fuse");
  ScoreMap out(maps[0].height, maps[0].width, 0.0);
  for (const auto& m : maps) {
    if (!m.same_shape(out)) {
      throw Error(ErrorKind::dimension_mismatch, "cannot fuse maps of different shapes");
    }
    for (std::size_t i = 0; i < m.size(); ++i) out.values[i] += m.values[i];
  }
  if (maps.size() > 1) {
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (double& v : out.values) v *= inv;
  }
  return out;
}

Threshold select_threshold(std::span<const double> val_scores, ThresholdStrategy strategy,
                           std::string source) {
  if (val_scores.empty()) throw Error(ErrorKind::undefined_metric, "no validation scores for a threshold");
  std::vector<double> sorted(val_scores.begin(), val_scores.end());
  std::sort(sorted.begin(), sorted.end());
  Threshold t;
  t.strategy = strategy;
  t.source = std::move(source);
  if (strategy.kind == ThresholdKind::max) {
    t.value = sorted.back();
  } else {
    if (!(strategy.q >= 0.0 && strategy.q <= 1.0)) {
      throw Error(ErrorKind::invalid_config, "quantile must lie in [0, 1]");
    }
    const double pos = strategy.q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    t.value = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  }
  if (!std::isfinite(t.value)) throw Error(ErrorKind::non_finite_value, "threshold is not finite");
  return t;
}

Label classify(double image_score, const Threshold& threshold) {
  return image_score > threshold.value ? Label::anomalous : Label::normal;
}

std::string to_string(const ThresholdStrategy& strategy) {
  if (strategy.kind == ThresholdKind::max) return "max";
  char buf[64];
  std::snprintf(buf, sizeof buf, "quantile(%g)", strategy.q);
  return buf;
}

ThresholdStrategy parse_threshold_strategy(const std::string& text) {
  if (text == "max") return {ThresholdKind::max, 0.0};
  if (text == "quantile") return {};
  if (text.starts_with("quantile(") && text.ends_with(")")) {
    const auto inner = text.substr(9, text.size() - 10);
    try {
      std::size_t used = 0;
      const double q = std::stod(inner, &used);
      if (used == inner.size() && q >= 0.0 && q <= 1.0) return {ThresholdKind::quantile, q};
    } catch (const std::exception&) {
    }
  }
  throw Error(ErrorKind::invalid_config,
              "threshold strategy must be 'max', 'quantile' or 'quantile(q)', got '" + text + "'");
}

std::vector<AnomalyMap> build_anomaly_maps(const std::vector<std::vector<ScoreMap>>& raw,
                                           std::size_t group_size, std::size_t target) {
  const std::size_t n = raw.size();
  if (n == 0) return {};
  const std::size_t scales = raw[0].size();
  for (const auto& per_image : raw) {
    if (per_image.size() != scales) {
      throw Error(ErrorKind::dimension_mismatch, "images disagree on the number of scales");
    }
  }
  const std::size_t group = group_size == 0 ? n : group_size;

  // upsampled[i][s]
  std::vector<std::vector<ScoreMap>> upsampled(n, std::vector<ScoreMap>(scales));
  for (std::size_t s = 0; s < scales; ++s) {
    for (std::size_t begin = 0; begin < n; begin += group) {
      const std::size_t end = std::min(n, begin + group);
      std::vector<ScoreMap> set;
      for (std::size_t i = begin; i < end; ++i) set.push_back(raw[i][s]);
      auto normalized = normalize_batch(set);
      for (std::size_t i = begin; i < end; ++i) {
        upsampled[i][s] = upsample_bilinear(normalized[i - begin], target);
      }
    }
  }

  std::vector<AnomalyMap> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto fused = fuse_scales(upsampled[i]);
    Grid2D<float> scores(fused.height, fused.width);
    for (std::size_t j = 0; j < fused.size(); ++j) {
      scores.values[j] = static_cast<float>(std::clamp(fused.values[j], 0.0, 1.0));
    }
    out.push_back(AnomalyMap::from_scores(std::move(scores)));
  }
  return out;
}

}  // namespace patchguard
