#include "patchguard/gmm_head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "patchguard/error.hpp"
#include "patchguard/parallel.hpp"
#include "patchguard/rng.hpp"

namespace patchguard {
namespace {

constexpr std::string_view kMagic = "GMMH";
constexpr std::uint32_t kVersion = 1;
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);
const double kLogSigmaMin = std::log(kSigmaMin);
const double kLogSigmaMax = std::log(kSigmaMax);

// Intermediates of one patch's forward pass, reused across patches.
struct Workspace {
  std::vector<double> log_pi, mu, log_sigma, log_comp;
  std::vector<unsigned char> inside;  // raw scale within the clamp range

  explicit Workspace(const GmmLayout& L)
      : log_pi(L.k), mu(L.k * L.dim), log_sigma(L.k * L.dim), log_comp(L.k), inside(L.k * L.dim) {}
};

double dot(const double* w, std::span<const double> x) {
  double acc = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) acc += w[d] * x[d];
  return acc;
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double a : v) s += std::exp(a - m);
  return m + std::log(s);
}

// Returns the patch NLL and leaves the intermediates in ws.
double forward_core(const GmmHead& head, const GmmLayout& L, std::span<const double> x, Workspace& ws) {
  const double* p = head.params.data();
  const std::size_t D = L.dim, K = L.k;
  for (std::size_t k = 0; k < K; ++k) {
    ws.log_pi[k] = p[L.pi_bias + k] + dot(p + L.pi_weight + k * D, x);
  }
  const double lse = log_sum_exp(ws.log_pi);
  for (auto& v : ws.log_pi) v -= lse;

  for (std::size_t j = 0; j < K * D; ++j) {
    ws.mu[j] = p[L.mu_bias + j] + dot(p + L.mu_weight + j * D, x);
    const double raw = p[L.sigma_bias + j] + dot(p + L.sigma_weight + j * D, x);
    ws.inside[j] = raw > kLogSigmaMin && raw < kLogSigmaMax;
    ws.log_sigma[j] = std::clamp(raw, kLogSigmaMin, kLogSigmaMax);
  }
  for (std::size_t k = 0; k < K; ++k) {
    double acc = ws.log_pi[k] - static_cast<double>(D) * kHalfLog2Pi;
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t j = k * D + d;
      const double u = (x[d] - ws.mu[j]) * std::exp(-ws.log_sigma[j]);
      acc -= 0.5 * u * u + ws.log_sigma[j];
    }
    ws.log_comp[k] = acc;
  }
  return -log_sum_exp(ws.log_comp);
}

// Adds the (unweighted) gradient of one patch's NLL into grad.
void backward_core(const GmmLayout& L, std::span<const double> x, double nll, const Workspace& ws,
                   double* grad) {
  const std::size_t D = L.dim, K = L.k;
  for (std::size_t k = 0; k < K; ++k) {
    const double resp = std::exp(ws.log_comp[k] + nll);
    const double g_logit = std::exp(ws.log_pi[k]) - resp;
    double* gw = grad + L.pi_weight + k * D;
    for (std::size_t d = 0; d < D; ++d) gw[d] += g_logit * x[d];
    grad[L.pi_bias + k] += g_logit;

    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t j = k * D + d;
      const double inv_var = std::exp(-2.0 * ws.log_sigma[j]);
      const double diff = x[d] - ws.mu[j];
      const double g_mu = -resp * diff * inv_var;
      const double g_raw = ws.inside[j] ? -resp * (diff * diff * inv_var - 1.0) : 0.0;
      double* gmu = grad + L.mu_weight + j * D;
      double* gsig = grad + L.sigma_weight + j * D;
      for (std::size_t i = 0; i < D; ++i) {
        gmu[i] += g_mu * x[i];
        gsig[i] += g_raw * x[i];
      }
      grad[L.mu_bias + j] += g_mu;
      grad[L.sigma_bias + j] += g_raw;
    }
  }
}

void check_head(const GmmHead& head) {
  if (head.params.size() != gmm_parameter_count(head.dim, head.num_gaussians)) {
    throw Error(ErrorKind::dimension_mismatch, "GMM head holds " + std::to_string(head.params.size()) +
                                                   " parameters, layout needs " +
                                                   std::to_string(gmm_parameter_count(head.dim, head.num_gaussians)));
  }
}

void check_patch_dim(const GmmHead& head, std::size_t dim) {
  if (dim != head.dim) {
    throw Error(ErrorKind::dimension_mismatch,
                "GMM head expects D=" + std::to_string(head.dim) + ", got " + std::to_string(dim));
  }
}

struct PatchRef {
  const PatchGrid* grid;
  std::size_t y, x;
};

std::vector<PatchRef> flatten(const GmmHead& head, std::span<const PatchGrid* const> grids) {
  std::vector<PatchRef> refs;
  for (const auto* g : grids) {
    check_patch_dim(head, g->channels());
    for (std::size_t y = 0; y < g->height(); ++y)
      for (std::size_t x = 0; x < g->width(); ++x) refs.push_back({g, y, x});
  }
  return refs;
}

// Sum of NLLs (and optionally of gradients) over all patches, chunked across
// threads and reduced in chunk order.
double accumulate(const GmmHead& head, std::span<const PatchGrid* const> grids, double* grad,
                  std::size_t threads, std::size_t* count) {
  check_head(head);
  const GmmLayout L = head.layout();
  const auto refs = flatten(head, grids);
  *count = refs.size();
  const std::size_t chunks = chunk_count(refs.size(), threads);
  std::vector<double> sums(chunks, 0.0);
  std::vector<std::vector<double>> partial(grad ? chunks - 1 : 0, std::vector<double>());

  parallel_chunks(refs.size(), threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
    Workspace ws(L);
    std::vector<double> x(L.dim);
    double* g = nullptr;
    if (grad) {
      if (c == 0) {
        g = grad;
      } else {
        partial[c - 1].assign(L.total, 0.0);
        g = partial[c - 1].data();
      }
    }
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto patch = refs[i].grid->patch(refs[i].y, refs[i].x);
      std::copy(patch.begin(), patch.end(), x.begin());
      const double nll = forward_core(head, L, x, ws);
      if (!std::isfinite(nll)) {
        throw Error(ErrorKind::numeric_overflow, "GMM produced a non-finite patch NLL");
      }
      sum += nll;
      if (g) backward_core(L, x, nll, ws, g);
    }
    sums[c] = sum;
  });

  double total = 0.0;
  for (double s : sums) total += s;
  if (grad) {
    for (const auto& part : partial)
      for (std::size_t j = 0; j < L.total; ++j) grad[j] += part[j];
  }
  return total;
}

}  // namespace

void GmmConfig::validate() const {
  if (dim < 1) throw Error(ErrorKind::invalid_config, "GMM embedding dim must be >= 1");
  if (num_gaussians < 1) throw Error(ErrorKind::invalid_config, "GMM needs at least one Gaussian");
}

GmmLayout::GmmLayout(std::size_t d, std::size_t kk) : dim(d), k(kk) {
  pi_weight = 0;
  pi_bias = pi_weight + k * dim;
  mu_weight = pi_bias + k;
  mu_bias = mu_weight + k * dim * dim;
  sigma_weight = mu_bias + k * dim;
  sigma_bias = sigma_weight + k * dim * dim;
  total = sigma_bias + k * dim;
}

std::size_t gmm_parameter_count(std::size_t dim, std::size_t k) {
  return 2 * (dim * dim * k + k * dim) + (dim * k + k);
}

GmmHead init_gmm(const GmmConfig& config) {
  config.validate();
  GmmHead head{config.dim, config.num_gaussians, {}};
  const GmmLayout L = head.layout();
  head.params.assign(L.total, 0.0);

  // Weights ~ U(-1/sqrt(D), 1/sqrt(D)) rounded to f32 so a fresh head survives
  // a checkpoint round-trip bit-exactly. Biases start at zero: uniform mixture
  // weights and sigma = exp(0) = 1 at the origin.
  Xorshift64 rng(config.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.dim));
  auto fill = [&](std::size_t offset, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      head.params[offset + i] = static_cast<float>(rng.uniform(-scale, scale));
    }
  };
  fill(L.pi_weight, L.k * L.dim);
  fill(L.mu_weight, L.k * L.dim * L.dim);
  fill(L.sigma_weight, L.k * L.dim * L.dim);
  return head;
}

MixtureParams gmm_forward(const GmmHead& head, std::span<const double> patch) {
  check_head(head);
  check_patch_dim(head, patch.size());
  const GmmLayout L = head.layout();
  Workspace ws(L);
  forward_core(head, L, patch, ws);

  MixtureParams out;
  out.k = L.k;
  out.dim = L.dim;
  out.pi.resize(L.k);
  for (std::size_t k = 0; k < L.k; ++k) out.pi[k] = std::exp(ws.log_pi[k]);
  out.mu = ws.mu;
  out.sigma.resize(ws.log_sigma.size());
  for (std::size_t j = 0; j < ws.log_sigma.size(); ++j) {
    const double l = ws.log_sigma[j];
    out.sigma[j] = l <= kLogSigmaMin ? kSigmaMin : l >= kLogSigmaMax ? kSigmaMax : std::exp(l);
  }
  return out;
}

double gmm_nll(const MixtureParams& params, std::span<const double> x) {
  const std::size_t D = params.dim;
  std::vector<double> log_comp(params.k);
  for (std::size_t k = 0; k < params.k; ++k) {
    double acc = std::log(params.pi[k]) - static_cast<double>(D) * kHalfLog2Pi;
    for (std::size_t d = 0; d < D; ++d) {
      const double s = params.sigma[k * D + d];
      const double u = (x[d] - params.mu[k * D + d]) / s;
      acc -= 0.5 * u * u + std::log(s);
    }
    log_comp[k] = acc;
  }
  return -log_sum_exp(log_comp);
}

std::vector<double> gmm_grad(const GmmHead& head, std::span<const std::vector<double>> batch) {
  check_head(head);
  const GmmLayout L = head.layout();
  std::vector<double> grad(L.total, 0.0);
  if (batch.empty()) return grad;
  Workspace ws(L);
  for (const auto& x : batch) {
    check_patch_dim(head, x.size());
    const double nll = forward_core(head, L, x, ws);
    backward_core(L, x, nll, ws, grad.data());
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv_n;
  return grad;
}

ScoreMap gmm_patch_scores(const GmmHead& head, const PatchGrid& grid) {
  check_head(head);
  check_patch_dim(head, grid.channels());
  const GmmLayout L = head.layout();
  Workspace ws(L);
  ScoreMap map(grid.height(), grid.width());
  std::vector<double> x(L.dim);
  for (std::size_t y = 0; y < grid.height(); ++y) {
    for (std::size_t xx = 0; xx < grid.width(); ++xx) {
      const auto patch = grid.patch(y, xx);
      std::copy(patch.begin(), patch.end(), x.begin());
      map.at(y, xx) = forward_core(head, L, x, ws);
    }
  }
  return map;
}

double gmm_mean_nll(const GmmHead& head, std::span<const PatchGrid* const> grids, std::size_t threads) {
  std::size_t n = 0;
  const double total = accumulate(head, grids, nullptr, threads, &n);
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double gmm_loss_and_grad(const GmmHead& head, std::span<const PatchGrid* const> grids,
                         std::span<double> grad, std::size_t threads) {
  check_head(head);
  if (grad.size() != head.params.size()) {
    throw Error(ErrorKind::dimension_mismatch, "gradient buffer does not match GMM parameter count");
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  std::size_t n = 0;
  const double total = accumulate(head, grids, grad.data(), threads, &n);
  if (n == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (double& g : grad) g *= inv_n;
  return total * inv_n;
}

void write_gmm(binary::Writer& out, const GmmHead& head) {
  check_head(head);
  out.magic(kMagic);
  out.u32(kVersion);
  out.u32(static_cast<std::uint32_t>(head.dim));
  out.u32(static_cast<std::uint32_t>(head.num_gaussians));
  for (double v : head.params) out.f32(static_cast<float>(v));
}

GmmHead read_gmm(binary::Reader& in) {
  if (!in.magic(kMagic)) throw Error(ErrorKind::format, "expected GMMH checkpoint magic");
  const auto version = in.u32("version");
  if (version != kVersion) {
    throw Error(ErrorKind::version_mismatch, "GMMH version " + std::to_string(version) +
                                                 ", this build reads version " + std::to_string(kVersion));
  }
  GmmHead head;
  head.dim = in.u32("D");
  head.num_gaussians = in.u32("K");
  if (head.dim == 0 || head.num_gaussians == 0) {
    throw Error(ErrorKind::format, "GMMH checkpoint declares a zero dimension");
  }
  const std::size_t n = gmm_parameter_count(head.dim, head.num_gaussians);
  in.require(n * 4, "GMMH payload");
  head.params.resize(n);
  for (auto& v : head.params) v = in.f32();
  return head;
}

}  // namespace patchguard
