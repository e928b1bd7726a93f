#include <doctest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "oracles.hpp"
#include "patchguard/binary_io.hpp"
#include "patchguard/error.hpp"
#include "patchguard/gmm_head.hpp"
#include "patchguard/rng.hpp"
#include "patchguard/training.hpp"

using namespace patchguard;

namespace {

GmmHead random_head(std::size_t D, std::size_t K, std::uint64_t seed, double scale = 0.5) {
  GmmHead h = init_gmm({D, K, seed});
  Xorshift64 rng(seed + 99);
  for (auto& p : h.params) p = rng.uniform(-scale, scale);
  return h;
}

std::vector<double> random_vec(std::size_t n, Xorshift64& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

MixtureParams single(std::size_t D, std::size_t K) {
  MixtureParams p;
  p.k = K;
  p.dim = D;
  p.pi.assign(K, 1.0 / static_cast<double>(K));
  p.mu.assign(K * D, 0.0);
  p.sigma.assign(K * D, 1.0);
  return p;
}

double mean_nll(const GmmHead& h, const std::vector<std::vector<double>>& batch) {
  double s = 0;
  for (const auto& x : batch) s += gmm_nll(gmm_forward(h, x), x);
  return s / static_cast<double>(batch.size());
}

}  // namespace

TEST_SUITE("gmm_head") {

TEST_CASE("parameter count formula") {
  CHECK(gmm_parameter_count(768, 100) == 118195300);
  CHECK(gmm_parameter_count(512, 100) == 52582500);
  CHECK(init_gmm({4, 2, 1}).params.size() == gmm_parameter_count(4, 2));
  const GmmLayout L(3, 2);
  CHECK(L.total == gmm_parameter_count(3, 2));
  CHECK(L.sigma_bias + 6 == L.total);
}

TEST_CASE("initialization is seeded and bounded") {
  const auto a = init_gmm({4, 2, 1}), b = init_gmm({4, 2, 1});
  CHECK(a == b);
  CHECK(a != init_gmm({4, 2, 2}));
  const auto L = a.layout();
  for (std::size_t i = L.mu_weight; i < L.mu_bias; ++i) CHECK(std::abs(a.params[i]) <= 0.5);
  // Biases start at zero: sigma = 1 and uniform pi at the origin.
  const auto p = gmm_forward(a, std::vector<double>(4, 0.0));
  for (double s : p.sigma) CHECK(s == doctest::Approx(1.0));
  for (double w : p.pi) CHECK(w == doctest::Approx(0.5));
  CHECK_THROWS_AS(init_gmm({0, 2, 1}), Error);
}

TEST_CASE("zero parameters give uniform pi, zero mean, unit scale") {
  GmmHead h = init_gmm({3, 4, 0});
  std::fill(h.params.begin(), h.params.end(), 0.0);
  const auto p = gmm_forward(h, std::vector<double>{1.0, -2.0, 0.5});
  for (double w : p.pi) CHECK(w == doctest::Approx(0.25));
  for (double m : p.mu) CHECK(m == 0.0);
  for (double s : p.sigma) CHECK(s == 1.0);
}

TEST_CASE("forward matches a direct evaluation of the linear maps") {
  Xorshift64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto h = random_head(3, 4, trial);
    const auto x = random_vec(3, rng);
    const auto p = gmm_forward(h, x);
    const auto L = h.layout();
    double z = 0;
    std::vector<double> e(4);
    for (std::size_t k = 0; k < 4; ++k) {
      double a = h.params[L.pi_bias + k];
      for (std::size_t i = 0; i < 3; ++i) a += h.params[L.pi_weight + k * 3 + i] * x[i];
      e[k] = std::exp(a);
      z += e[k];
    }
    for (std::size_t k = 0; k < 4; ++k) CHECK(p.pi[k] == doctest::Approx(e[k] / z).epsilon(1e-12));
    for (std::size_t r = 0; r < 12; ++r) {
      double mu = h.params[L.mu_bias + r], raw = h.params[L.sigma_bias + r];
      for (std::size_t i = 0; i < 3; ++i) {
        mu += h.params[L.mu_weight + r * 3 + i] * x[i];
        raw += h.params[L.sigma_weight + r * 3 + i] * x[i];
      }
      CHECK(p.mu[r] == doctest::Approx(mu).epsilon(1e-12));
      CHECK(p.sigma[r] == doctest::Approx(std::exp(raw)).epsilon(1e-12));
    }
    CHECK(std::accumulate(p.pi.begin(), p.pi.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(gmm_forward(random_head(3, 2, 0), std::vector<double>(4)), Error);
}

TEST_CASE("scale is clamped to its bounds") {
  GmmHead h = init_gmm({1, 1, 0});
  std::fill(h.params.begin(), h.params.end(), 0.0);
  h.params[h.layout().sigma_bias] = 100.0;
  CHECK(gmm_forward(h, std::vector<double>{0.0}).sigma[0] == kSigmaMax);
  h.params[h.layout().sigma_bias] = -100.0;
  CHECK(gmm_forward(h, std::vector<double>{0.0}).sigma[0] == kSigmaMin);
}

TEST_CASE("NLL reference values") {
  const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);
  CHECK(gmm_nll(single(1, 1), std::vector<double>{0.0}) == doctest::Approx(half_log_2pi).epsilon(1e-12));
  CHECK(gmm_nll(single(1, 2), std::vector<double>{0.0}) == doctest::Approx(0.918939).epsilon(1e-6));
  // Far from every component log-sum-exp stays finite where direct summation underflows.
  CHECK(std::isfinite(gmm_nll(single(2, 3), std::vector<double>{80.0, -80.0})));
}

TEST_CASE("NLL equals direct summation on random cases") {
  Xorshift64 rng(11);
  for (std::uint64_t t = 0; t < 100; ++t) {
    const auto h = random_head(3, 4, t);
    const auto x = random_vec(3, rng);
    CHECK(gmm_nll(gmm_forward(h, x), x) == doctest::Approx(oracle::naive_gmm_nll(h, x)).epsilon(1e-10));
  }
}

TEST_CASE("property: softmax sums to one, scales positive, NLL bounded by the best component") {
  Xorshift64 rng(17);
  for (std::uint64_t t = 0; t < 50; ++t) {
    const std::size_t D = 1 + t % 5, K = 1 + t % 4;
    const auto h = random_head(D, K, t, 2.0);
    auto x = random_vec(D, rng);
    for (auto& v : x) v *= 3;
    const auto p = gmm_forward(h, x);
    CHECK(std::accumulate(p.pi.begin(), p.pi.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    for (double s : p.sigma) CHECK(s > 0.0);
    double best = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      double logn = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double s = p.sigma[k * D + d], u = (x[d] - p.mu[k * D + d]) / s;
        logn += -0.5 * u * u - std::log(s) - 0.5 * std::log(2 * std::numbers::pi);
      }
      best = std::max(best, logn);
    }
    CHECK(gmm_nll(p, x) >= -best - std::log(static_cast<double>(K)) - 1e-9);
    CHECK(gmm_nll(p, x) >= -best - 1e-9);
  }
}

TEST_CASE("gradient matches central differences on D=3, K=2, batch=5") {
  Xorshift64 rng(23);
  auto h = random_head(3, 2, 4);
  std::vector<std::vector<double>> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_vec(3, rng));
  const auto g = gmm_grad(h, batch);
  const auto fd = oracle::fd_gradient([&] { return mean_nll(h, batch); }, h.params);
  REQUIRE(g.size() == fd.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    CAPTURE(i);
    CHECK(oracle::rel_error(g[i], fd[i]) < 1e-4);
  }
}

TEST_CASE("a patch at its predicted mean contributes no quadratic mean gradient") {
  GmmHead h = init_gmm({2, 2, 0});
  std::fill(h.params.begin(), h.params.end(), 0.0);
  const auto L = h.layout();
  // mu = bias only; put component 0's mean at x.
  const std::vector<double> x{0.3, -0.7};
  h.params[L.mu_bias + 0] = x[0];
  h.params[L.mu_bias + 1] = x[1];
  const auto g = gmm_grad(h, std::vector<std::vector<double>>{x});
  CHECK(g[L.mu_bias + 0] == doctest::Approx(0.0));
  CHECK(g[L.mu_bias + 1] == doctest::Approx(0.0));
}

TEST_CASE("duplicating the batch leaves the gradient unchanged") {
  Xorshift64 rng(29);
  const auto h = random_head(3, 3, 8);
  std::vector<std::vector<double>> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_vec(3, rng));
  auto twice = batch;
  twice.insert(twice.end(), batch.begin(), batch.end());
  const auto a = gmm_grad(h, batch), b = gmm_grad(h, twice);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("patch scores") {
  const auto h = random_head(3, 2, 1);
  PatchGrid constant(GridShape{2, 3, 3});
  for (std::size_t i = 0; i < constant.data().size(); ++i) constant.data()[i] = static_cast<float>(i % 3) * 0.5f;
  const auto m = gmm_patch_scores(h, constant);
  CHECK(m.height == 2);
  CHECK(m.width == 3);
  for (double v : m.values) CHECK(v == doctest::Approx(m.values[0]).epsilon(1e-14));

  PatchGrid one(GridShape{1, 1, 3}, {0.25f, -1.0f, 2.0f});
  const std::vector<double> x{0.25, -1.0, 2.0};
  CHECK(gmm_patch_scores(h, one).values[0] == doctest::Approx(gmm_nll(gmm_forward(h, x), x)).epsilon(1e-14));
  CHECK_THROWS_AS(gmm_patch_scores(h, PatchGrid(GridShape{1, 1, 4})), Error);

  const auto big = init_gmm({768, 2, 0});
  const auto map = gmm_patch_scores(big, PatchGrid(GridShape{14, 14, 768}));
  CHECK(map.height == 14);
  CHECK(map.width == 14);
}

TEST_CASE("batched loss and gradient agree with the per-patch functions") {
  Xorshift64 rng(31);
  const auto h = random_head(4, 3, 2, 0.3);
  std::vector<PatchGrid> grids;
  std::vector<std::vector<double>> patches;
  for (int i = 0; i < 3; ++i) {
    PatchGrid g(GridShape{2, 2, 4});
    for (auto& v : g.data()) v = static_cast<float>(rng.normal());
    for (std::size_t p = 0; p < 4; ++p) {
      const auto s = g.data().subspan(p * 4, 4);
      patches.emplace_back(s.begin(), s.end());
    }
    grids.push_back(g);
  }
  std::vector<const PatchGrid*> ptrs;
  for (auto& g : grids) ptrs.push_back(&g);
  std::vector<double> grad(h.params.size());
  for (std::size_t threads : {1, 3}) {
    const double loss = gmm_loss_and_grad(h, ptrs, grad, threads);
    CHECK(loss == doctest::Approx(mean_nll(h, patches)).epsilon(1e-12));
    CHECK(gmm_mean_nll(h, ptrs, threads) == doctest::Approx(loss).epsilon(1e-12));
    const auto ref = gmm_grad(h, patches);
    for (std::size_t i = 0; i < grad.size(); ++i) CHECK(grad[i] == doctest::Approx(ref[i]).epsilon(1e-10));
  }
}

TEST_CASE("checkpoint record round-trips and rejects foreign bytes") {
  auto h = random_head(3, 2, 6);
  for (auto& p : h.params) p = static_cast<float>(p);
  binary::Writer w;
  write_gmm(w, h);
  const auto bytes = w.take();
  binary::Reader r(bytes, ErrorKind::truncated_payload);
  CHECK(read_gmm(r) == h);
  CHECK(r.at_end());
  auto bad = bytes;
  bad[0] = std::byte{'Z'};
  binary::Reader r2(bad, ErrorKind::truncated_payload);
  CHECK_THROWS_AS(read_gmm(r2), Error);
}

TEST_CASE("trainability: Adam beats the best single Gaussian on a two-component mixture") {
  Xorshift64 rng(37);
  std::vector<std::vector<double>> data;
  for (int i = 0; i < 500; ++i) {
    const double c = rng.below(2) ? 3.0 : -3.0;
    data.push_back({c + 0.5 * rng.normal(), -c + 0.5 * rng.normal()});
  }
  // Best single Gaussian: per-dimension sample mean and variance.
  double single_nll = 0;
  for (std::size_t d = 0; d < 2; ++d) {
    double m = 0, v = 0;
    for (const auto& x : data) m += x[d];
    m /= 500;
    for (const auto& x : data) v += (x[d] - m) * (x[d] - m);
    v /= 500;
    single_nll += 0.5 * std::log(2 * std::numbers::pi * v) + 0.5;
  }
  GmmHead h = init_gmm({2, 2, 3});
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.0;
  AdamState state;
  for (int step = 0; step < 200; ++step) adam_step(h.params, gmm_grad(h, data), state, cfg);
  CHECK(mean_nll(h, data) < single_nll);
}

}  // TEST_SUITE
