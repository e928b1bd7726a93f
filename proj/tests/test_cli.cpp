#include <doctest.h>

#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "patchguard/binary_io.hpp"
#include "patchguard/cli.hpp"
#include "patchguard/png_io.hpp"
#include "patchguard/synthetic.hpp"

using namespace patchguard;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path toy_archive(const fs::path& dir, std::size_t dim = 8, std::size_t n_anomalous = 6) {
  ToyConfig c;
  c.dim = dim;
  c.height = c.width = 4;
  c.block = 2;
  c.n_train = 30;
  c.n_test = 12;
  c.n_anomalous = n_anomalous;
  c.seed = 5;
  const auto path = dir / ("toy_d" + std::to_string(dim) + "_a" + std::to_string(n_anomalous) + ".pea");
  write_archive(make_toy_dataset(c), path);
  return path;
}

std::vector<std::string> quick_train(const fs::path& archive, const fs::path& out, const std::string& head) {
  return {"train", "--archive", archive.string(), "--head", head, "--out", out.string(), "--gaussians", "3",
          "--steps", "2", "--epochs", "6", "--patience", "3", "--seed", "1", "--threads", "1"};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("train populates the run directory") {
  const auto dir = oracle::scratch_dir("cli_train");
  const auto archive = toy_archive(dir);
  const auto r = invoke({"train", "--archive", archive.string(), "--head", "nf", "--steps", "4", "--seed", "1",
                      "--epochs", "5", "--patience", "2", "--out", (dir / "run").string()});
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "run" / "run.meta"));
  CHECK(fs::exists(dir / "run" / "best.ckpt"));
  CHECK(fs::exists(dir / "run" / "history.csv"));
  const auto run = load_run(dir / "run");
  CHECK(run.meta.head.flow_steps == 4);
  CHECK(run.meta.train.learning_rate == 1e-3);
  CHECK(run.meta.split.seed == 1);
}

TEST_CASE("same invocation twice gives byte-identical outputs") {
  const auto dir = oracle::scratch_dir("cli_determinism");
  const auto archive = toy_archive(dir);
  for (const char* head : {"gmm", "nf"}) {
    for (const char* name : {"a", "b"}) {
      const auto run = dir / (std::string(head) + name);
      REQUIRE(invoke(quick_train(archive, run, head)).code == 0);
      REQUIRE(invoke({"eval", "--run", run.string(), "--threads", "1"}).code == 0);
    }
    for (const char* file : {"best.ckpt", "history.csv", "run.meta", "metrics.csv", "scores.csv"}) {
      CAPTURE(file);
      CHECK(slurp(dir / (std::string(head) + "a") / file) == slurp(dir / (std::string(head) + "b") / file));
    }
  }
  CHECK(slurp(dir / "gmma" / "metrics.csv").starts_with(
      "dataset_class,head,backbone,image_auroc,prauc,pixel_auroc,pro,threshold,n_test\n"));
}

TEST_CASE("dimension mismatch exits with code 2 naming both dimensions") {
  const auto dir = oracle::scratch_dir("cli_mismatch");
  const auto a8 = toy_archive(dir, 8), a6 = toy_archive(dir, 6);
  const auto run = dir / "run";
  REQUIRE(invoke(quick_train(a8, run, "gmm")).code == 0);
  const auto r = invoke({"eval", "--run", run.string(), "--archive", a6.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("D=8") != std::string::npos);
  CHECK(r.err.find("D=6") != std::string::npos);
  const auto t = invoke({"train", "--archive", a6.string(), "--dim", "8", "--out", (dir / "x").string()});
  CHECK(t.code == 2);
  CHECK(t.err.find("D=8") != std::string::npos);
  CHECK(t.err.find("D=6") != std::string::npos);
}

TEST_CASE("usage, data and config errors map to exit codes") {
  const auto dir = oracle::scratch_dir("cli_errors");
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"train"}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
  CHECK(invoke({"train", "--archive", (dir / "missing.pea").string(), "--out", (dir / "r").string()}).code == 3);
  const auto archive = toy_archive(dir);
  CHECK(invoke({"train", "--archive", archive.string(), "--out", (dir / "r").string(), "--head", "vae"}).code == 2);
  CHECK(invoke({"train", "--archive", archive.string(), "--out", (dir / "r").string(), "--layer", "3"}).code == 2);
  std::ofstream(dir / "garbage.pea") << "not an archive";
  CHECK(invoke({"inspect", (dir / "garbage.pea").string()}).code == 3);
  CHECK(invoke({"train", "--config", (dir / "nope.cfg").string()}).code == 2);
}

TEST_CASE("config file supplies flags and the command line overrides them") {
  const auto dir = oracle::scratch_dir("cli_config");
  const auto archive = toy_archive(dir);
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "# toy run\n"
        << "archive = " << archive.string() << "\n"
        << "head = gmm\n"
        << "gaussians = 2\n"
        << "epochs = 4\n"
        << "patience = 2\n"
        << "learning_rate = 0.5\n"
        << "lr = 0.002\n";
  }
  // learning_rate is not a flag.
  CHECK(invoke({"train", "--config", (dir / "run.cfg").string(), "--out", (dir / "bad").string()}).code == 2);
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "archive = " << archive.string() << "\nhead = gmm\ngaussians = 2\nepochs = 4\npatience = 2\nlr = 0.002\n";
  }
  REQUIRE(invoke({"train", "--config", (dir / "run.cfg").string(), "--gaussians", "3", "--out", (dir / "run").string()})
              .code == 0);
  const auto run = load_run(dir / "run");
  CHECK(run.meta.head.num_gaussians == 3);
  CHECK(run.meta.train.learning_rate == 0.002);
  CHECK(run.meta.train.max_epochs == 4);
}

TEST_CASE("normal-only test split marks metrics undefined") {
  const auto dir = oracle::scratch_dir("cli_undefined");
  const auto archive = toy_archive(dir, 8, 0);
  const auto run = dir / "run";
  REQUIRE(invoke(quick_train(archive, run, "gmm")).code == 0);
  const auto r = invoke({"eval", "--run", run.string()});
  CHECK(r.code == 0);
  const auto csv = slurp(run / "metrics.csv");
  CHECK(csv.find("undefined,undefined,undefined,undefined") != std::string::npos);
}

TEST_CASE("export-maps writes one decodable PNG per test image") {
  const auto dir = oracle::scratch_dir("cli_export");
  const auto archive = toy_archive(dir);
  const auto run = dir / "run";
  REQUIRE(invoke(quick_train(archive, run, "gmm")).code == 0);
  REQUIRE(invoke({"export-maps", "--run", run.string(), "--out", (dir / "maps").string()}).code == 0);
  const auto ds = load_archive(archive);
  const auto l = load_run(run);
  const auto ev = cli::evaluate(l, ds, {});
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const auto png = read_png_gray(dir / "maps" / (ds.test[i].id + ".png"));
    CHECK(png.height == 224);
    CHECK(png.width == 224);
    for (std::size_t p = 0; p < png.size(); p += 211) {
      const double expect = std::floor(double{ev.test_maps[i].scores.values[p]} * 255.0 + 0.5);
      CHECK(static_cast<double>(png.values[p]) == expect);
    }
  }
  CHECK(fs::exists(dir / "maps" / "scores.csv"));
  // A constant score gives a uniform gray image.
  const auto gray = to_gray_image(Grid2D<float>(224, 224, 0.5f));
  for (auto v : gray.values) CHECK(v == 128);
}

TEST_CASE("score and inspect") {
  const auto dir = oracle::scratch_dir("cli_score");
  const auto archive = toy_archive(dir);
  const auto run = dir / "run";
  REQUIRE(invoke(quick_train(archive, run, "nf")).code == 0);
  CHECK(invoke({"score", "--run", run.string(), "--out", (dir / "s").string(), "--threshold", "max"}).code == 0);
  const auto csv = slurp(dir / "s" / "scores.csv");
  CHECK(csv.starts_with("id,image_score,label,prediction\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
  const auto r = invoke({"inspect", archive.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("(4, 4, 8)") != std::string::npos);
  CHECK(r.out.find("6 anomalous") != std::string::npos);
  CHECK(invoke({"eval", "--run", run.string(), "--per-batch", "--batch-size", "4", "--out", (dir / "pb").string()})
            .code == 0);
}

TEST_CASE("sweep writes one row per value") {
  const auto dir = oracle::scratch_dir("cli_sweep");
  const auto archive = toy_archive(dir);
  const auto r = invoke({"sweep", "--archive", archive.string(), "--head", "gmm", "--param", "num-gaussians",
                      "--values", "2,4,8", "--epochs", "4", "--patience", "2", "--seed", "3", "--out",
                      (dir / "sw").string()});
  REQUIRE(r.code == 0);
  const auto csv = slurp(dir / "sw" / "sweep.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.find("\n2,") != std::string::npos);
  CHECK(csv.find("\n8,") != std::string::npos);
  CHECK(slurp(dir / "sw" / "sweep_summary.txt").find("spearman_val_loss_pro") != std::string::npos);
  for (std::size_t i = 0; i < 3; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "run_%03zu", i);
    const auto run = load_run(dir / "sw" / name);
    CHECK(run.meta.head.seed == 3 + i);
    CHECK(run.meta.train.seed == 3 + i);
    CHECK(run.meta.split.seed == 3);
  }
  CHECK(invoke({"sweep", "--archive", archive.string(), "--head", "gmm", "--param", "flow-steps", "--values", "2",
             "--out", (dir / "x").string()})
            .code == 2);
  CHECK(invoke({"sweep", "--archive", archive.string(), "--param", "depth", "--values", "2", "--out",
             (dir / "x").string()})
            .code == 2);
}

}  // TEST_SUITE
