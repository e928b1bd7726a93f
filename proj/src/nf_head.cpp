#include "patchguard/nf_head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "patchguard/error.hpp"
#include "patchguard/parallel.hpp"
#include "patchguard/rng.hpp"

namespace patchguard {
namespace {

constexpr std::string_view kMagic = "NFH1";
constexpr std::uint32_t kVersion = 1;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

struct Conv {
  std::size_t height, width, cin, cout, k;
  const double* weight;  // [cout][cin][k][k]
  const double* bias;    // [cout]
};

// out (H x W x cout, contiguous) = conv(in) with zero padding k/2; the input
// holds `cin` channels at a per-location stride of `in_stride`.
void conv_forward(const Conv& c, const double* in, std::size_t in_stride, double* out) {
  const std::size_t kk = c.k * c.k;
  const auto pad = static_cast<std::ptrdiff_t>(c.k / 2);
  const auto H = static_cast<std::ptrdiff_t>(c.height), W = static_cast<std::ptrdiff_t>(c.width);
  for (std::size_t loc = 0; loc < c.height * c.width; ++loc)
    for (std::size_t co = 0; co < c.cout; ++co) out[loc * c.cout + co] = c.bias[co];
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double* op = out + (y * W + x) * static_cast<std::ptrdiff_t>(c.cout);
      for (std::size_t ky = 0; ky < c.k; ++ky) {
        const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - pad;
        if (sy < 0 || sy >= H) continue;
        for (std::size_t kx = 0; kx < c.k; ++kx) {
          const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pad;
          if (sx < 0 || sx >= W) continue;
          const double* ip = in + (sy * W + sx) * static_cast<std::ptrdiff_t>(in_stride);
          for (std::size_t co = 0; co < c.cout; ++co) {
            const double* wp = c.weight + co * c.cin * kk + ky * c.k + kx;
            double acc = 0.0;
            for (std::size_t ci = 0; ci < c.cin; ++ci) acc += wp[ci * kk] * ip[ci];
            op[co] += acc;
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients and, when g_in is non-null, the input
// gradient (same stride as the input).
void conv_backward(const Conv& c, const double* in, std::size_t in_stride, const double* g_out,
                   double* g_weight, double* g_bias, double* g_in) {
  const std::size_t kk = c.k * c.k;
  const auto pad = static_cast<std::ptrdiff_t>(c.k / 2);
  const auto H = static_cast<std::ptrdiff_t>(c.height), W = static_cast<std::ptrdiff_t>(c.width);
  for (std::size_t loc = 0; loc < c.height * c.width; ++loc)
    for (std::size_t co = 0; co < c.cout; ++co) g_bias[co] += g_out[loc * c.cout + co];
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      const double* gop = g_out + (y * W + x) * static_cast<std::ptrdiff_t>(c.cout);
      for (std::size_t ky = 0; ky < c.k; ++ky) {
        const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - pad;
        if (sy < 0 || sy >= H) continue;
        for (std::size_t kx = 0; kx < c.k; ++kx) {
          const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pad;
          if (sx < 0 || sx >= W) continue;
          const std::ptrdiff_t src = (sy * W + sx) * static_cast<std::ptrdiff_t>(in_stride);
          const double* ip = in + src;
          double* gip = g_in ? g_in + src : nullptr;
          for (std::size_t co = 0; co < c.cout; ++co) {
            const double go = gop[co];
            if (go == 0.0) continue;
            const std::size_t base = co * c.cin * kk + ky * c.k + kx;
            for (std::size_t ci = 0; ci < c.cin; ++ci) {
              g_weight[base + ci * kk] += go * ip[ci];
              if (gip) gip[ci] += go * c.weight[base + ci * kk];
            }
          }
        }
      }
    }
  }
}

struct StepParams {
  Conv conv1;
  Conv conv2;
  std::size_t w1, b1, w2, b2;  // offsets relative to the step block
};

StepParams step_params(const FlowHead& head, const FlowStep& step, const double* base) {
  const auto& cfg = head.config;
  const std::size_t D = cfg.dim, half = D / 2, hidden = cfg.hidden(), k = step.kernel, kk = k * k;
  StepParams p{};
  p.w1 = 0;
  p.b1 = p.w1 + hidden * half * kk;
  p.w2 = p.b1 + hidden;
  p.b2 = p.w2 + D * hidden * kk;
  const double* block = base + step.offset;
  p.conv1 = {cfg.height, cfg.width, half, hidden, k, block + p.w1, block + p.b1};
  p.conv2 = {cfg.height, cfg.width, hidden, D, k, block + p.w2, block + p.b2};
  return p;
}

double soft_clamp(double s, double alpha) {
  return (2.0 * alpha / std::numbers::pi) * std::atan(s / alpha);
}

double soft_clamp_derivative(double s, double alpha) {
  const double r = s / alpha;
  return (2.0 / std::numbers::pi) / (1.0 + r * r);
}

// Activations of one step needed by the backward pass.
struct StepCache {
  std::vector<double> y;    // permuted input, H x W x D
  std::vector<double> h1;   // conv1 pre-activation, H x W x hidden
  std::vector<double> a1;   // relu(h1)
  std::vector<double> st;   // conv2 output (s | t), H x W x D
};

void subnet(const StepParams& p, const double* y, std::size_t D, StepCache& cache) {
  conv_forward(p.conv1, y, D, cache.h1.data());
  for (std::size_t i = 0; i < cache.h1.size(); ++i) cache.a1[i] = std::max(0.0, cache.h1[i]);
  conv_forward(p.conv2, cache.a1.data(), p.conv1.cout, cache.st.data());
}

void check_finite(std::span<const double> values, std::size_t step_index) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::numeric_overflow,
                  "flow step " + std::to_string(step_index + 1) + " produced a non-finite value");
    }
  }
}

void check_shape(const FlowHead& head, const GridShape& shape) {
  const auto& c = head.config;
  const GridShape want{static_cast<std::uint32_t>(c.height), static_cast<std::uint32_t>(c.width),
                       static_cast<std::uint32_t>(c.dim)};
  if (shape != want) {
    throw Error(ErrorKind::dimension_mismatch,
                "flow expects grid " + to_string(want) + ", got " + to_string(shape));
  }
}

// Forward pass; fills caches (one per step) when non-null.
FlowOutput forward_impl(const FlowHead& head, const DenseGrid& grid, std::vector<StepCache>* caches) {
  check_shape(head, grid.shape);
  const auto& cfg = head.config;
  const std::size_t D = cfg.dim, half = D / 2, locs = cfg.height * cfg.width, hidden = cfg.hidden();
  const double alpha = cfg.clamp_alpha;

  FlowOutput out;
  out.logdet = ScoreMap(cfg.height, cfg.width, 0.0);
  std::vector<double> cur = grid.values;
  StepCache local;
  for (std::size_t si = 0; si < head.steps.size(); ++si) {
    const auto& step = head.steps[si];
    StepCache& cache = caches ? (*caches)[si] : local;
    cache.y.resize(locs * D);
    cache.h1.resize(locs * hidden);
    cache.a1.resize(locs * hidden);
    cache.st.resize(locs * D);
    for (std::size_t loc = 0; loc < locs; ++loc)
      for (std::size_t c = 0; c < D; ++c) cache.y[loc * D + c] = cur[loc * D + step.permutation[c]];

    const auto p = step_params(head, step, head.params.data());
    subnet(p, cache.y.data(), D, cache);
    for (std::size_t loc = 0; loc < locs; ++loc) {
      double ld = 0.0;
      for (std::size_t c = 0; c < half; ++c) {
        const double cs = soft_clamp(cache.st[loc * D + c], alpha);
        const double t = cache.st[loc * D + half + c];
        cur[loc * D + c] = cache.y[loc * D + c];
        cur[loc * D + half + c] = cache.y[loc * D + half + c] * std::exp(cs) + t;
        ld += cs;
      }
      out.logdet.values[loc] += ld;
    }
    check_finite(cur, si);
    check_finite(out.logdet.values, si);
  }
  out.z.shape = grid.shape;
  out.z.values = std::move(cur);
  return out;
}

// Sum over locations of the patch NLL, and (if grad) the unnormalized gradient.
double sample_loss(const FlowHead& head, const PatchGrid& grid, double* grad,
                   std::vector<StepCache>& caches) {
  const auto& cfg = head.config;
  const std::size_t D = cfg.dim, half = D / 2, locs = cfg.height * cfg.width, hidden = cfg.hidden();
  const double alpha = cfg.clamp_alpha;
  const auto dense = DenseGrid::from(grid);
  const auto out = forward_impl(head, dense, grad ? &caches : nullptr);
  double total = 0.0;
  for (double v : flow_nll(out).values) total += v;
  if (!grad) return total;

  // d(0.5|z|^2)/dz = z; d(-logdet)/d(cs) = -1 at every step.
  std::vector<double> g_cur = out.z.values;
  std::vector<double> g_y(locs * D), g_st(locs * D), g_a1(locs * hidden);
  for (std::size_t si = head.steps.size(); si-- > 0;) {
    const auto& step = head.steps[si];
    const auto& cache = caches[si];
    const auto p = step_params(head, step, head.params.data());
    double* g_block = grad + step.offset;

    for (std::size_t loc = 0; loc < locs; ++loc) {
      for (std::size_t c = 0; c < half; ++c) {
        const std::size_t a = loc * D + c, b = loc * D + half + c;
        const double s = cache.st[a];
        const double e = std::exp(soft_clamp(s, alpha));
        const double g_b_out = g_cur[b];
        g_y[a] = g_cur[a];
        g_y[b] = g_b_out * e;
        g_st[b] = g_b_out;
        const double g_cs = g_b_out * cache.y[b] * e - 1.0;
        g_st[a] = g_cs * soft_clamp_derivative(s, alpha);
      }
    }
    std::fill(g_a1.begin(), g_a1.end(), 0.0);
    conv_backward(p.conv2, cache.a1.data(), hidden, g_st.data(), g_block + p.w2, g_block + p.b2,
                  g_a1.data());
    for (std::size_t i = 0; i < g_a1.size(); ++i) {
      if (cache.h1[i] <= 0.0) g_a1[i] = 0.0;
    }
    conv_backward(p.conv1, cache.y.data(), D, g_a1.data(), g_block + p.w1, g_block + p.b1, g_y.data());

    for (std::size_t loc = 0; loc < locs; ++loc)
      for (std::size_t c = 0; c < D; ++c) g_cur[loc * D + step.permutation[c]] = g_y[loc * D + c];
  }
  return total;
}

double accumulate(const FlowHead& head, std::span<const PatchGrid* const> grids, double* grad,
                  std::size_t threads) {
  for (const auto* g : grids) check_shape(head, g->shape());
  const std::size_t n = grids.size();
  const std::size_t chunks = chunk_count(n, threads);
  std::vector<double> sums(chunks, 0.0);
  std::vector<std::vector<double>> partial(grad ? chunks - 1 : 0);
  parallel_chunks(n, threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
    std::vector<StepCache> caches(head.steps.size());
    double* g = nullptr;
    if (grad) {
      if (c == 0) {
        g = grad;
      } else {
        partial[c - 1].assign(head.params.size(), 0.0);
        g = partial[c - 1].data();
      }
    }
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) sum += sample_loss(head, *grids[i], g, caches);
    sums[c] = sum;
  });
  double total = 0.0;
  for (double s : sums) total += s;
  if (grad) {
    for (const auto& part : partial)
      for (std::size_t j = 0; j < part.size(); ++j) grad[j] += part[j];
  }
  return total;
}

}  // namespace

void FlowConfig::validate() const {
  if (dim < 2 || dim % 2 != 0) {
    throw Error(ErrorKind::invalid_config,
                "flow embedding dim must be even and >= 2, got " + std::to_string(dim));
  }
  if (height < 1 || width < 1) throw Error(ErrorKind::invalid_config, "flow grid must be at least 1x1");
  if (num_steps < 1) throw Error(ErrorKind::invalid_config, "flow needs at least one step");
  if (!(hidden_ratio > 0.0f)) throw Error(ErrorKind::invalid_config, "hidden ratio must be positive");
  if (!(clamp_alpha > 0.0f)) throw Error(ErrorKind::invalid_config, "clamp alpha must be positive");
  if (odd_step_kernel % 2 == 0 || even_step_kernel % 2 == 0) {
    throw Error(ErrorKind::invalid_config, "convolution kernels must have odd size");
  }
}

std::size_t FlowConfig::hidden() const {
  const auto h = static_cast<std::size_t>(std::llround(static_cast<double>(hidden_ratio) * static_cast<double>(dim)));
  return std::max<std::size_t>(1, h);
}

std::size_t FlowConfig::kernel_for_step(std::size_t step_index) const {
  return step_index % 2 == 0 ? odd_step_kernel : even_step_kernel;
}

std::size_t flow_step_parameter_count(std::size_t dim, std::size_t hidden, std::size_t kernel) {
  const std::size_t kk = kernel * kernel;
  return hidden * (dim / 2) * kk + hidden + dim * hidden * kk + dim;
}

DenseGrid DenseGrid::from(const PatchGrid& grid) {
  DenseGrid d;
  d.shape = grid.shape();
  d.values.assign(grid.data().begin(), grid.data().end());
  return d;
}

PatchGrid DenseGrid::to_patch_grid() const {
  std::vector<float> data(values.begin(), values.end());
  return PatchGrid(shape, std::move(data));
}

FlowHead init_flow(const FlowConfig& config) {
  config.validate();
  FlowHead head;
  head.config = config;
  Xorshift64 rng(config.seed);
  const std::size_t D = config.dim, half = D / 2, hidden = config.hidden();
  std::size_t offset = 0;
  for (std::size_t s = 0; s < config.num_steps; ++s) {
    FlowStep step;
    step.kernel = config.kernel_for_step(s);
    step.permutation.resize(D);
    std::iota(step.permutation.begin(), step.permutation.end(), 0u);
    rng.shuffle(std::span(step.permutation));
    step.offset = offset;
    offset += flow_step_parameter_count(D, hidden, step.kernel);
    head.steps.push_back(std::move(step));
  }
  head.params.assign(offset, 0.0);
  // conv1 ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); conv2 and biases stay zero so
  // every coupling starts as the identity.
  for (const auto& step : head.steps) {
    const std::size_t kk = step.kernel * step.kernel;
    const double bound = 1.0 / std::sqrt(static_cast<double>(half * kk));
    for (std::size_t i = 0; i < hidden * half * kk; ++i) {
      head.params[step.offset + i] = static_cast<float>(rng.uniform(-bound, bound));
    }
  }
  return head;
}

double flow_relu_margin(const FlowHead& head, const PatchGrid& grid) {
  std::vector<StepCache> caches(head.steps.size());
  forward_impl(head, DenseGrid::from(grid), &caches);
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& c : caches)
    for (double h : c.h1) margin = std::min(margin, std::abs(h));
  return margin;
}

FlowOutput flow_forward(const FlowHead& head, const PatchGrid& grid) {
  return forward_impl(head, DenseGrid::from(grid), nullptr);
}

FlowOutput flow_forward(const FlowHead& head, const DenseGrid& grid) {
  return forward_impl(head, grid, nullptr);
}

DenseGrid flow_inverse(const FlowHead& head, const DenseGrid& z) {
  check_shape(head, z.shape);
  const auto& cfg = head.config;
  const std::size_t D = cfg.dim, half = D / 2, locs = cfg.height * cfg.width, hidden = cfg.hidden();
  const double alpha = cfg.clamp_alpha;
  std::vector<double> cur = z.values;
  std::vector<double> y(locs * D);
  StepCache cache;
  cache.h1.resize(locs * hidden);
  cache.a1.resize(locs * hidden);
  cache.st.resize(locs * D);
  for (std::size_t si = head.steps.size(); si-- > 0;) {
    const auto& step = head.steps[si];
    const auto p = step_params(head, step, head.params.data());
    // The active half passes through unchanged, so the subnet sees the same input.
    subnet(p, cur.data(), D, cache);
    for (std::size_t loc = 0; loc < locs; ++loc) {
      for (std::size_t c = 0; c < half; ++c) {
        const double cs = soft_clamp(cache.st[loc * D + c], alpha);
        const double t = cache.st[loc * D + half + c];
        y[loc * D + c] = cur[loc * D + c];
        y[loc * D + half + c] = (cur[loc * D + half + c] - t) * std::exp(-cs);
      }
    }
    for (std::size_t loc = 0; loc < locs; ++loc)
      for (std::size_t c = 0; c < D; ++c) cur[loc * D + step.permutation[c]] = y[loc * D + c];
    check_finite(cur, si);
  }
  return DenseGrid{z.shape, std::move(cur)};
}

ScoreMap flow_nll(const FlowOutput& output) {
  const std::size_t D = output.z.shape.channels;
  ScoreMap map(output.logdet.height, output.logdet.width);
  for (std::size_t loc = 0; loc < map.size(); ++loc) {
    double sq = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      const double v = output.z.values[loc * D + c];
      sq += v * v;
    }
    map.values[loc] = 0.5 * sq + 0.5 * static_cast<double>(D) * kLog2Pi - output.logdet.values[loc];
  }
  return map;
}

std::vector<double> flow_grad(const FlowHead& head, std::span<const PatchGrid> batch) {
  std::vector<const PatchGrid*> ptrs;
  for (const auto& g : batch) ptrs.push_back(&g);
  std::vector<double> grad(head.params.size(), 0.0);
  flow_loss_and_grad(head, ptrs, grad, 1);
  return grad;
}

double flow_mean_nll(const FlowHead& head, std::span<const PatchGrid* const> grids, std::size_t threads) {
  if (grids.empty()) return 0.0;
  const double total = accumulate(head, grids, nullptr, threads);
  return total / static_cast<double>(grids.size() * head.config.height * head.config.width);
}

double flow_loss_and_grad(const FlowHead& head, std::span<const PatchGrid* const> grids,
                          std::span<double> grad, std::size_t threads) {
  if (grad.size() != head.params.size()) {
    throw Error(ErrorKind::dimension_mismatch, "gradient buffer does not match flow parameter count");
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  if (grids.empty()) return 0.0;
  const double total = accumulate(head, grids, grad.data(), threads);
  const double inv_m = 1.0 / static_cast<double>(grids.size() * head.config.height * head.config.width);
  for (double& g : grad) g *= inv_m;
  return total * inv_m;
}

void write_flow(binary::Writer& out, const FlowHead& head) {
  const auto& c = head.config;
  out.magic(kMagic);
  out.u32(kVersion);
  out.u32(static_cast<std::uint32_t>(c.dim));
  out.u32(static_cast<std::uint32_t>(c.height));
  out.u32(static_cast<std::uint32_t>(c.width));
  out.u32(static_cast<std::uint32_t>(head.steps.size()));
  out.f32(c.hidden_ratio);
  out.f32(c.clamp_alpha);
  out.u64(c.seed);
  const std::size_t hidden = c.hidden();
  for (const auto& step : head.steps) {
    out.u32(static_cast<std::uint32_t>(step.kernel));
    for (auto idx : step.permutation) out.u32(idx);
    const std::size_t n = flow_step_parameter_count(c.dim, hidden, step.kernel);
    for (std::size_t i = 0; i < n; ++i) out.f32(static_cast<float>(head.params[step.offset + i]));
  }
}

FlowHead read_flow(binary::Reader& in) {
  if (!in.magic(kMagic)) throw Error(ErrorKind::format, "expected NFH1 checkpoint magic");
  const auto version = in.u32("version");
  if (version != kVersion) {
    throw Error(ErrorKind::version_mismatch, "NFH1 version " + std::to_string(version) +
                                                 ", this build reads version " + std::to_string(kVersion));
  }
  FlowHead head;
  auto& c = head.config;
  c.dim = in.u32("D");
  c.height = in.u32("H");
  c.width = in.u32("W");
  c.num_steps = in.u32("steps");
  c.hidden_ratio = in.f32("hidden ratio");
  c.clamp_alpha = in.f32("clamp alpha");
  c.seed = in.u64("seed");
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::format, std::string("NFH1 config block: ") + e.what());
  }
  const std::size_t hidden = c.hidden();
  std::size_t offset = 0;
  for (std::size_t s = 0; s < c.num_steps; ++s) {
    FlowStep step;
    step.kernel = in.u32("kernel size");
    if (step.kernel % 2 == 0 || step.kernel > 15) {
      throw Error(ErrorKind::format, "NFH1 step " + std::to_string(s + 1) + " has kernel " +
                                         std::to_string(step.kernel));
    }
    if (s == 0) c.odd_step_kernel = step.kernel;
    if (s == 1) c.even_step_kernel = step.kernel;
    step.permutation.resize(c.dim);
    std::vector<bool> seen(c.dim, false);
    for (auto& idx : step.permutation) {
      idx = in.u32("permutation");
      if (idx >= c.dim || seen[idx]) {
        throw Error(ErrorKind::format, "NFH1 step " + std::to_string(s + 1) + " permutation is not a bijection");
      }
      seen[idx] = true;
    }
    const std::size_t n = flow_step_parameter_count(c.dim, hidden, step.kernel);
    in.require(n * 4, "NFH1 step payload");
    step.offset = offset;
    head.params.resize(offset + n);
    for (std::size_t i = 0; i < n; ++i) head.params[offset + i] = in.f32();
    offset += n;
    head.steps.push_back(std::move(step));
  }
  return head;
}

}  // namespace patchguard
