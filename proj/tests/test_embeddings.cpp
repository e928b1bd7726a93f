#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>

#include "oracles.hpp"
#include "patchguard/embeddings.hpp"
#include "patchguard/error.hpp"
#include "patchguard/rng.hpp"
#include "patchguard/synthetic.hpp"

using namespace patchguard;

namespace {

PatchGrid random_grid(GridShape shape, Xorshift64& rng) {
  PatchGrid g(shape);
  for (auto& v : g.data()) v = static_cast<float>(rng.normal());
  return g;
}

EmbeddingDataset random_dataset(std::uint64_t seed) {
  Xorshift64 rng(seed);
  EmbeddingDataset ds;
  ds.meta.backbone = "bb" + std::to_string(seed);
  const std::size_t n_scales = 1 + rng.below(3);
  for (std::size_t s = 0; s < n_scales; ++s) {
    ds.meta.scales.push_back({static_cast<std::uint32_t>(1 + rng.below(4)), static_cast<std::uint32_t>(1 + rng.below(4)),
                              static_cast<std::uint32_t>(1 + rng.below(5))});
  }
  auto sample = [&](std::string id, Label label) {
    Sample s;
    s.id = std::move(id);
    s.label = label;
    for (const auto& shape : ds.meta.scales) s.grids.push_back(random_grid(shape, rng));
    if (label == Label::anomalous || rng.below(2)) {
      Mask m(kImageSize, kImageSize, 0);
      for (auto& v : m.values) v = rng.below(7) == 0;
      s.mask = m;
    }
    return s;
  };
  for (std::size_t i = 0, n = rng.below(5); i < n; ++i) {
    Sample s = sample("tr" + std::to_string(i), Label::normal);
    s.mask.reset();
    ds.train.push_back(s);
  }
  for (std::size_t i = 0, n = rng.below(5); i < n; ++i) {
    ds.test.push_back(sample("te" + std::to_string(i), rng.below(2) ? Label::anomalous : Label::normal));
  }
  return ds;
}

EmbeddingDataset two_sample_dataset() {
  EmbeddingDataset ds;
  ds.meta.backbone = "toy";
  ds.meta.scales = {{2, 2, 3}};
  Xorshift64 rng(3);
  for (int i = 0; i < 2; ++i) {
    Sample s;
    s.id = "n" + std::to_string(i);
    s.grids.push_back(random_grid({2, 2, 3}, rng));
    ds.train.push_back(s);
  }
  return ds;
}

std::vector<Sample> numbered(std::size_t n) {
  std::vector<Sample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = "s" + std::to_string(i);
    out[i].grids.emplace_back(GridShape{1, 1, 1});
  }
  return out;
}

std::set<std::string> ids(const std::vector<Sample>& v) {
  std::set<std::string> out;
  for (const auto& s : v) out.insert(s.id);
  return out;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::io;
}

}  // namespace

TEST_SUITE("embeddings") {

TEST_CASE("two-sample archive round-trips through a file") {
  const auto dir = oracle::scratch_dir("emb_roundtrip");
  const auto ds = two_sample_dataset();
  write_archive(ds, dir / "a.pea");
  const auto back = load_archive(dir / "a.pea");
  CHECK(back.train.size() == 2);
  REQUIRE(back.meta.scales.size() == 1);
  CHECK(back.meta.scales[0] == GridShape{2, 2, 3});
  CHECK(back == ds);
}

TEST_CASE("declared length beyond the file is a truncated payload") {
  auto bytes = encode_archive(two_sample_dataset());
  bytes.resize(bytes.size() - 5);
  CHECK(kind_of([&] { decode_archive(bytes); }) == ErrorKind::truncated_payload);
}

TEST_CASE("NaN in a grid is reported with the sample id") {
  auto ds = two_sample_dataset();
  auto bytes = encode_archive(ds);
  // Patch the first float of sample n1 in place by re-encoding with a marker.
  ds.train[1].grids[0].data()[2] = 12345.0f;
  auto marked = encode_archive(ds);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const float marker = 12345.0f;
  for (std::size_t i = 0; i + 4 <= marked.size(); ++i) {
    if (std::memcmp(marked.data() + i, &marker, 4) == 0) std::memcpy(marked.data() + i, &nan, 4);
  }
  try {
    decode_archive(marked);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::non_finite_value);
    CHECK(std::string(e.what()).find("n1") != std::string::npos);
  }
  CHECK_NOTHROW(decode_archive(bytes));
}

TEST_CASE("header corruption and version mismatch") {
  auto bytes = encode_archive(two_sample_dataset());
  auto bad_magic = bytes;
  bad_magic[0] = std::byte{'X'};
  CHECK(kind_of([&] { decode_archive(bad_magic); }) == ErrorKind::corrupt_header);
  auto bad_version = bytes;
  bad_version[4] = std::byte{9};
  CHECK(kind_of([&] { decode_archive(bad_version); }) == ErrorKind::corrupt_header);
  auto trailing = bytes;
  trailing.push_back(std::byte{0});
  CHECK(kind_of([&] { decode_archive(trailing); }) == ErrorKind::dimension_mismatch);
  CHECK(kind_of([&] { load_archive("/nonexistent/archive.pea"); }) == ErrorKind::io);
}

TEST_CASE("mask bytes are preserved and an empty train split is representable") {
  EmbeddingDataset ds;
  ds.meta.backbone = "m";
  ds.meta.scales = {{1, 1, 2}};
  Sample s;
  s.id = "bad";
  s.label = Label::anomalous;
  s.grids.emplace_back(GridShape{1, 1, 2}, std::vector<float>{1.0f, -2.0f});
  s.mask = block_mask(4, 4, 1, 2, 2);
  ds.test.push_back(s);
  const auto back = decode_archive(encode_archive(ds));
  CHECK(back.train.empty());
  REQUIRE(back.test.size() == 1);
  REQUIRE(back.test[0].mask.has_value());
  CHECK(back.test[0].mask->values == s.mask->values);
}

TEST_CASE("property: random datasets round-trip exactly") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto ds = random_dataset(seed);
    CAPTURE(seed);
    CHECK(decode_archive(encode_archive(ds)) == ds);
  }
}

TEST_CASE("validation rejects malformed datasets") {
  auto ds = two_sample_dataset();
  ds.train[0].label = Label::anomalous;
  CHECK(kind_of([&] { ds.validate(); }) == ErrorKind::invalid_sample);
  ds = two_sample_dataset();
  ds.train[0].grids[0] = PatchGrid(GridShape{2, 2, 4});
  CHECK(kind_of([&] { ds.validate(); }) == ErrorKind::dimension_mismatch);
  ds = two_sample_dataset();
  ds.train[0].mask = Mask(10, 10, 0);
  CHECK(kind_of([&] { ds.validate(); }) != ErrorKind::io);
  CHECK_THROWS_AS(PatchGrid(GridShape{2, 2, 2}, std::vector<float>(7)), Error);
}

TEST_CASE("split sizes follow the rounding rule") {
  const auto ten = numbered(10);
  const auto a = split_train_val(ten, {7, 0.8});
  CHECK(a.train.size() == 8);
  CHECK(a.val.size() == 2);
  const auto b = split_train_val(ten, {7, 0.8});
  CHECK(ids(a.val) == ids(b.val));
  const auto five = split_train_val(numbered(5), {1, 0.8});
  CHECK(five.train.size() == 4);
  CHECK(five.val.size() == 1);
  CHECK(kind_of([&] { split_train_val(numbered(1), {}); }) == ErrorKind::cannot_split);
  CHECK(validation_count(2, 0.99) == 1);
  CHECK(validation_count(2, 0.01) == 1);
  CHECK(validation_count(200, 0.8) == 40);
}

TEST_CASE("property: splits are exact partitions, seeded and order-preserving") {
  std::size_t differing = 0, eligible = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t n = 2 + seed % 30;
    const auto all = numbered(n);
    const auto p = split_train_val(all, {seed, 0.8});
    auto u = ids(p.train);
    for (const auto& id : ids(p.val)) CHECK(u.insert(id).second);
    CHECK(u == ids(all));
    CHECK(p.val.size() == validation_count(n, 0.8));
    auto in_order = [&](const std::vector<Sample>& part) {
      std::vector<int> idx;
      for (const auto& s : part) idx.push_back(std::stoi(s.id.substr(1)));
      return std::is_sorted(idx.begin(), idx.end());
    };
    CHECK(in_order(p.train));
    CHECK(in_order(p.val));
    if (n >= 10) {
      ++eligible;
      differing += ids(split_train_val(all, {seed + 1000, 0.8}).val) != ids(p.val);
    }
  }
  CHECK(eligible >= 30);
  CHECK(differing + 1 >= eligible);
}

TEST_CASE("toy generator matches its configuration") {
  ToyConfig c;
  c.pooled_scale = true;
  c.n_train = 10;
  c.n_test = 6;
  c.n_anomalous = 3;
  const auto ds = make_toy_dataset(c);
  CHECK_NOTHROW(ds.validate());
  REQUIRE(ds.meta.scales.size() == 2);
  CHECK(ds.meta.scales[1] == GridShape{4, 4, 16});
  CHECK(ds.train.size() == 10);
  const auto anomalous = std::count_if(ds.test.begin(), ds.test.end(), [](auto& s) { return s.label == Label::anomalous; });
  CHECK(anomalous == 3);
  for (const auto& s : ds.test) {
    CHECK(s.mask.has_value() == (s.label == Label::anomalous));
    if (s.mask) {
      // A 3x3 block of an 8x8 grid covers 3 * 28 pixels per side.
      CHECK(std::count(s.mask->values.begin(), s.mask->values.end(), 1) == 84 * 84);
    }
  }
  CHECK(make_toy_dataset(c) == ds);
}

}  // TEST_SUITE
