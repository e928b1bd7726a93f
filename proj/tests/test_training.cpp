#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "patchguard/binary_io.hpp"
#include "patchguard/error.hpp"
#include "patchguard/rng.hpp"
#include "patchguard/synthetic.hpp"
#include "patchguard/training.hpp"

using namespace patchguard;

namespace {

EmbeddingDataset cluster_dataset(std::size_t n, std::size_t D, std::size_t H, std::uint64_t seed) {
  Xorshift64 rng(seed);
  EmbeddingDataset ds;
  ds.meta.backbone = "cluster";
  const GridShape shape{static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(D)};
  ds.meta.scales = {shape};
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "c" + std::to_string(i);
    PatchGrid g(shape);
    for (std::size_t j = 0; j < g.data().size(); ++j) {
      g.data()[j] = static_cast<float>(1.5 + 0.4 * rng.normal() + 0.5 * static_cast<double>(j % D));
    }
    s.grids.push_back(g);
    ds.train.push_back(s);
  }
  return ds;
}

TrainConfig quick(std::size_t epochs, std::size_t patience, double lr) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.patience = patience;
  c.learning_rate = lr;
  c.batch_size = 16;
  return c;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("defaults per head") {
  const auto g = TrainConfig::defaults_for(HeadKind::gmm);
  CHECK(g.learning_rate == 1e-4);
  CHECK(g.weight_decay == 1e-4);
  CHECK(g.batch_size == 8);
  const auto f = TrainConfig::defaults_for(HeadKind::nf);
  CHECK(f.learning_rate == 1e-3);
  CHECK(f.weight_decay == 1e-5);
  CHECK(f.batch_size == 32);
  CHECK(parse_head_kind("nf") == HeadKind::nf);
  CHECK_THROWS_AS(parse_head_kind("vae"), Error);
  TrainConfig bad;
  bad.patience = bad.max_epochs;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("Adam reference steps") {
  TrainConfig c;
  c.weight_decay = 0.0;
  std::vector<double> w{1.0, -2.0};
  AdamState s;
  adam_step(w, std::vector<double>{0.0, 0.0}, s, c);
  CHECK(w == std::vector<double>{1.0, -2.0});

  c.learning_rate = 0.1;
  std::vector<double> x{0.5};
  AdamState s1;
  adam_step(x, std::vector<double>{1.0}, s1, c);
  CHECK(x[0] == doctest::Approx(0.4).epsilon(1e-7));
}

TEST_CASE("Adam matches an independent implementation over 10 random steps") {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.weight_decay = 0.1;
  Xorshift64 rng(3);
  std::vector<double> w(7), ref;
  for (auto& v : w) v = rng.normal();
  ref = w;
  AdamState s;
  oracle::ScalarAdam other{c.learning_rate, c.weight_decay, c.beta1, c.beta2, c.eps, {}, {}};
  for (int step = 0; step < 10; ++step) {
    std::vector<double> g(7);
    for (auto& v : g) v = rng.normal();
    adam_step(w, g, s, c);
    other.step(ref, g);
  }
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(w[i] - ref[i]) < 1e-12);
}

TEST_CASE("early stopping rule") {
  EarlyStopping stop(30);
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= 200; ++e) {
    const double loss = e <= 40 ? 100.0 - static_cast<double>(e) : 60.0;
    stop.observe(e, loss);
    if (stop.should_stop(e)) {
      stopped = e;
      break;
    }
  }
  CHECK(stopped == 70);
  CHECK(stop.best_epoch() == 40);
  CHECK(stop.best_loss() == 60.0);
}

TEST_CASE("training returns the best-validation parameters and is deterministic") {
  const auto ds = cluster_dataset(60, 4, 2, 1);
  HeadOptions o;
  o.num_gaussians = 3;
  o.seed = 5;
  const auto det = Detector::create(HeadKind::gmm, ds.meta, {0}, o);
  const SplitSpec split{2, 0.8};
  const auto a = train(det, ds, split, quick(12, 4, 0.02));
  const auto b = train(det, ds, split, quick(12, 4, 0.02));
  CHECK(a.history == b.history);
  CHECK(a.detector == b.detector);
  REQUIRE(a.history.best_epoch >= 1);
  const auto& v = a.history.val_loss;
  CHECK(a.history.best_val_loss() == *std::min_element(v.begin(), v.end()));
  // Re-evaluating the returned parameters reproduces the recorded minimum up
  // to the f32 rounding of the checkpoint.
  const auto parts = split_train_val(ds.train, split);
  std::vector<const Sample*> val;
  for (const auto& s : parts.val) val.push_back(&s);
  CHECK(a.detector.mean_nll(val) == doctest::Approx(a.history.best_val_loss()).epsilon(1e-5));
  CHECK(a.history.best_val_loss() <= v.front());
}

TEST_CASE("flow training improves validation loss on a Gaussian cluster") {
  const auto ds = cluster_dataset(200, 8, 4, 2);
  HeadOptions o;
  o.flow_steps = 2;
  o.seed = 1;
  const auto det = Detector::create(HeadKind::nf, ds.meta, {0}, o);
  const auto r = train(det, ds, {3, 0.8}, quick(15, 5, 1e-2));
  CHECK(r.history.best_val_loss() < r.history.initial_val_loss);
}

TEST_CASE("thread count does not change single-threaded results and is deterministic per count") {
  const auto ds = cluster_dataset(40, 4, 2, 4);
  HeadOptions o;
  o.num_gaussians = 2;
  const auto det = Detector::create(HeadKind::gmm, ds.meta, {0}, o);
  const auto a = train(det, ds, {1, 0.8}, quick(5, 2, 0.01), 2);
  const auto b = train(det, ds, {1, 0.8}, quick(5, 2, 0.01), 2);
  CHECK(a.detector == b.detector);
}

TEST_CASE("multi-scale detector averages heads") {
  ToyConfig tc;
  tc.n_train = 6;
  tc.n_test = 0;
  tc.n_anomalous = 0;
  tc.pooled_scale = true;
  const auto ds = make_toy_dataset(tc);
  HeadOptions o;
  o.num_gaussians = 2;
  const auto det = Detector::create(HeadKind::gmm, ds.meta, {0, 1}, o);
  CHECK(det.head_count() == 2);
  CHECK(det.gmm[0] != det.gmm[1]);
  std::vector<const Sample*> ptrs;
  for (const auto& s : ds.train) ptrs.push_back(&s);
  const double both = det.mean_nll(ptrs);
  Detector first = det, second = det;
  first.scales = {0};
  first.gmm = {det.gmm[0]};
  second.scales = {1};
  second.gmm = {det.gmm[1]};
  CHECK(both == doctest::Approx(0.5 * (first.mean_nll(ptrs) + second.mean_nll(ptrs))).epsilon(1e-12));
  const auto maps = det.patch_scores(ds.train[0]);
  REQUIRE(maps.size() == 2);
  CHECK(maps[1].height == 4);
}

TEST_CASE("dimension mismatch names both dimensions") {
  const auto ds = cluster_dataset(4, 4, 2, 1);
  const auto det = Detector::create(HeadKind::gmm, ds.meta, {0}, {});
  const auto other = cluster_dataset(4, 6, 2, 1);
  try {
    det.check_compatible(other.meta);
    FAIL("expected mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension_mismatch);
    const std::string msg = e.what();
    CHECK(msg.find("D=4") != std::string::npos);
    CHECK(msg.find("D=6") != std::string::npos);
  }
}

TEST_CASE("numeric overflow aborts with the epoch") {
  auto ds = cluster_dataset(20, 2, 1, 1);
  for (auto& s : ds.train) s.grids[0].data()[0] = 1e30f;
  HeadOptions o;
  o.num_gaussians = 1;
  auto det = Detector::create(HeadKind::gmm, ds.meta, {0}, o);
  for (auto& p : det.gmm[0].params) p = 1e300;
  try {
    train(det, ds, {0, 0.8}, quick(3, 1, 0.1));
    FAIL("expected overflow");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric_overflow);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("run directory round-trip") {
  const auto dir = oracle::scratch_dir("train_run");
  for (auto kind : {HeadKind::gmm, HeadKind::nf}) {
    const auto ds = cluster_dataset(30, 4, 2, 7);
    HeadOptions o;
    o.num_gaussians = 2;
    o.flow_steps = 2;
    o.seed = 3;
    const auto r = train(Detector::create(kind, ds.meta, {0}, o), ds, {1, 0.8}, quick(4, 2, 0.01));
    RunRecord run{r.detector, r.history, {}};
    run.meta.archive = "a.pea";
    run.meta.dataset_hash = 0xDEADBEEF12345678ULL;
    run.meta.backbone = "cluster";
    run.meta.head = o;
    run.meta.train = quick(4, 2, 0.01);
    run.meta.split = {1, 0.8};
    run.meta.threads = 3;
    const auto sub = dir / std::string(to_string(kind));
    save_run(run, sub);
    const auto back = load_run(sub);
    CHECK(back.detector == run.detector);
    CHECK(back.history == run.history);
    CHECK(back.meta == run.meta);
    // Scores on a probe batch are bit-identical.
    CHECK(back.detector.patch_scores(ds.train[0]) == run.detector.patch_scores(ds.train[0]));
  }
  // Wrong magic in the checkpoint.
  auto bytes = binary::read_file(dir / "gmm" / "best.ckpt");
  bytes[0] = std::byte{'Q'};
  binary::write_file(dir / "gmm" / "best.ckpt", bytes);
  try {
    load_run(dir / "gmm");
    FAIL("expected a format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }
}

}  // TEST_SUITE
