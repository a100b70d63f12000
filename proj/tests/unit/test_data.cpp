#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <unistd.h>

#include "doctest.h"
#include "etm/data/batch_iterator.hpp"
#include "etm/data/io.hpp"
#include "etm/losses/losses.hpp"

using namespace etm;
using namespace etm::data;
namespace fs = std::filesystem;

namespace {

DomainSpec small_spec(int n = 24) {
  DomainSpec spec = etm_toy_preset()[0];
  spec.train_samples = n;
  spec.val_samples = n;
  return spec;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("etm_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct ThreadEnv {
  explicit ThreadEnv(const char* value) { ::setenv("ETM_NUM_THREADS", value, 1); }
  ~ThreadEnv() { ::unsetenv("ETM_NUM_THREADS"); }
};

}  // namespace

TEST_CASE("generation is deterministic and thread-count independent") {
  const DomainSpec spec = small_spec();
  DomainDataset a, b, c;
  {
    ThreadEnv env("1");
    a = generate_domain(spec, 5);
  }
  {
    ThreadEnv env("3");
    b = generate_domain(spec, 5);
  }
  c = generate_domain(spec, 6);
  CHECK(bitwise_equal(a.images, b.images));
  CHECK(*a.labels == *b.labels);
  CHECK_FALSE(bitwise_equal(a.images, c.images));

  ThreadEnv bad("zero");
  CHECK_THROWS_AS(generate_domain(spec, 5), std::invalid_argument);
}

TEST_CASE("zero shift against itself") {
  DomainSpec spec = small_spec();
  spec.shift.texture_noise_sigma = 0.0f;
  spec.shift.blur_radius = 0.0f;
  spec.shift.illumination_gain = 1.0f;
  CHECK(bitwise_equal(generate_domain(spec, 1).images, generate_domain(spec, 1).images));
}

TEST_CASE("domain shift never changes labels") {
  const auto preset = etm_toy_preset();
  DomainSpec base = small_spec();
  for (DomainSpec shifted : {preset[1], preset[2]}) {
    shifted.role = base.role;
    shifted.name = base.name;
    shifted.train_samples = base.train_samples;
    shifted.shift.clutter_density = 3.0f;
    const auto a = generate_domain(base, 9);
    const auto b = generate_domain(shifted, 9);
    CHECK(*a.labels == *b.labels);
    CHECK_FALSE(bitwise_equal(a.images, b.images));
  }
}

TEST_CASE("pixels stay in [0,1] under strong shifts") {
  DomainSpec spec = small_spec();
  spec.shift.illumination_gain = 3.0f;
  spec.shift.texture_noise_sigma = 0.5f;
  spec.shift.blur_radius = 2.0f;
  for (auto split : {Split::Train, Split::Val}) {
    const auto ds = generate_domain(spec, 2, split);
    const auto [lo, hi] = std::minmax_element(ds.images.data().begin(), ds.images.data().end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
  }
  spec.shift.illumination_gain = 0.05f;
  const auto dark = generate_domain(spec, 2);
  CHECK(*std::min_element(dark.images.data().begin(), dark.images.data().end()) >= 0.0f);
}

TEST_CASE("every image holds between one and four non-degenerate shapes") {
  const auto ds = generate_domain(small_spec(100), 3);
  const std::int64_t hw = 64 * 64;
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    std::vector<int> area(4, 0);
    for (std::int64_t p = 0; p < hw; ++p) {
      const int l = (*ds.labels)[i * hw + p];
      REQUIRE(l >= 0);
      REQUIRE(l < 4);
      ++area[static_cast<std::size_t>(l)];
    }
    int foreground = 0;
    for (int c = 1; c < 4; ++c) {
      if (area[static_cast<std::size_t>(c)] == 0) continue;
      foreground += area[static_cast<std::size_t>(c)];
      CHECK(area[static_cast<std::size_t>(c)] >= 20);
    }
    CHECK(foreground > 0);
    CHECK(area[0] > hw / 2);
  }
}

TEST_CASE("class presence over 200-image datasets") {
  const int kDatasets = 10;
  std::vector<int> datasets_with_class(4, 0);
  std::vector<double> image_fraction(4, 0.0);
  for (int seed = 0; seed < kDatasets; ++seed) {
    DomainSpec spec = small_spec(200);
    const auto ds = generate_domain(spec, static_cast<std::uint64_t>(seed));
    std::vector<int> images_with(4, 0);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
      std::set<int> present;
      for (std::int64_t p = 0; p < 64 * 64; ++p) present.insert((*ds.labels)[i * 64 * 64 + p]);
      for (int c : present) ++images_with[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < 4; ++c) {
      if (images_with[static_cast<std::size_t>(c)] > 0) ++datasets_with_class[static_cast<std::size_t>(c)];
      image_fraction[static_cast<std::size_t>(c)] += images_with[static_cast<std::size_t>(c)] / 200.0 / kDatasets;
    }
  }
  for (int c = 0; c < 4; ++c) {
    CAPTURE(c);
    CHECK(datasets_with_class[static_cast<std::size_t>(c)] >= 0.9 * kDatasets);
    CHECK(image_fraction[static_cast<std::size_t>(c)] > 0.5);
  }
}

TEST_CASE("labels exist only where allowed") {
  auto spec = etm_toy_preset()[1];
  spec.train_samples = 4;
  spec.val_samples = 4;
  CHECK_FALSE(generate_domain(spec, 1, Split::Train).labels.has_value());
  CHECK(generate_domain(spec, 1, Split::Val).labels.has_value());
  CHECK(generate_domain(small_spec(4), 1, Split::Train).labels.has_value());
}

TEST_CASE("spec validation and JSON") {
  DomainSpec spec = small_spec();
  CHECK_NOTHROW(validate(spec));
  DomainSpec bad = spec;
  bad.shift.palette.pop_back();
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = spec;
  bad.shift.texture_noise_sigma = -0.1f;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = spec;
  bad.shift.illumination_gain = 0.0f;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = spec;
  bad.num_classes = 1;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);

  for (const auto& s : etm_toy_preset()) {
    const nlohmann::json j = s;
    const auto back = j.get<DomainSpec>();
    CHECK(nlohmann::json(back) == j);
  }
  nlohmann::json j = spec;
  j["colour"] = 1;
  CHECK_THROWS_AS(j.get<DomainSpec>(), std::invalid_argument);
  j = spec;
  j["shift"]["gamma"] = 1;
  CHECK_THROWS_AS(j.get<DomainSpec>(), std::invalid_argument);
}

TEST_CASE("preset contract") {
  const auto preset = etm_toy_preset();
  REQUIRE(preset.size() == 3);
  CHECK(preset[0].role == Role::Source);
  for (const auto& s : preset) {
    CHECK(s.num_classes == 4);
    CHECK(s.height == 64);
    CHECK(s.width == 64);
    CHECK(s.train_samples == 400);
    CHECK(s.val_samples == 100);
  }
  CHECK(preset[1].role == Role::Target);
  CHECK(preset[1].shift.texture_noise_sigma > preset[0].shift.texture_noise_sigma);
  CHECK(preset[2].shift.blur_radius > 0.0f);
  CHECK(preset[2].shift.illumination_gain != 1.0f);
}

TEST_CASE("directory round trip") {
  TempDir tmp("roundtrip");
  const auto ds = generate_domain(small_spec(6), 4, Split::Val);
  save_directory_dataset(ds, tmp.path / "source" / "val");
  const auto loaded = load_directory_dataset(tmp.path / "source" / "val");
  CHECK(loaded.name == ds.name);
  CHECK(loaded.split == Split::Val);
  CHECK(loaded.role == Role::Source);
  CHECK(loaded.num_classes == 4);
  REQUIRE(loaded.images.shape() == ds.images.shape());
  CHECK(max_abs_diff(loaded.images, ds.images) <= 0.5f / 255.0f + 1e-6f);
  CHECK(*loaded.labels == *ds.labels);

  // Rewriting the same data gives byte-identical files.
  save_directory_dataset(ds, tmp.path / "again");
  for (const char* f : {"images/00000.png", "labels/00003.png", "domain.json"}) {
    CHECK(slurp(tmp.path / "source" / "val" / f) == slurp(tmp.path / "again" / f));
  }

  // Without labels/ the dataset is unlabelled.
  fs::remove_all(tmp.path / "again" / "labels");
  CHECK_FALSE(load_directory_dataset(tmp.path / "again").labels.has_value());
}

TEST_CASE("directory loader errors") {
  TempDir tmp("errors");
  fs::create_directories(tmp.path / "empty" / "images");
  CHECK_THROWS_WITH_AS(load_directory_dataset(tmp.path / "empty"), doctest::Contains("no images found"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(load_directory_dataset(tmp.path / "missing"), doctest::Contains("no images found"),
                       std::runtime_error);

  const auto ds = generate_domain(small_spec(2), 4);
  save_directory_dataset(ds, tmp.path / "bad");
  write_png(tmp.path / "bad" / "labels" / "00001.png", Image8{8, 8, 1, std::vector<std::uint8_t>(64)});
  CHECK_THROWS_WITH_AS(load_directory_dataset(tmp.path / "bad"), doctest::Contains("00001.png"), std::runtime_error);

  std::ofstream(tmp.path / "bad" / "images" / "00000.png") << "not a png";
  CHECK_THROWS_AS(load_directory_dataset(tmp.path / "bad"), std::runtime_error);
}

TEST_CASE("out-of-range labels fail at first use in the loss") {
  TempDir tmp("labels");
  auto ds = generate_domain(small_spec(1), 4);
  (*ds.labels)[5] = 7;
  (*ds.labels)[6] = 255;
  save_directory_dataset(ds, tmp.path);
  const auto loaded = load_directory_dataset(tmp.path);
  CHECK((*loaded.labels)[6] == 255);
  const Var logits(Tensor({1, 4, 8, 8}));
  CHECK_THROWS_AS(losses::segmentation_loss(logits, loaded.label_batch({0})), std::invalid_argument);
}

TEST_CASE("batch iterator") {
  const auto ds = generate_domain(small_spec(12), 4);
  SUBCASE("batch of N is a permutation") {
    BatchIterator it(ds, 12, 1, true);
    auto idx = it.next_indices();
    std::sort(idx.begin(), idx.end());
    for (int i = 0; i < 12; ++i) CHECK(idx[static_cast<std::size_t>(i)] == i);
  }
  SUBCASE("same seed, same stream") {
    BatchIterator a(ds, 5, 3, true), b(ds, 5, 3, true), c(ds, 5, 4, true);
    bool differs = false;
    for (int k = 0; k < 20; ++k) {
      const auto ia = a.next_indices();
      CHECK(ia == b.next_indices());
      differs = differs || ia != c.next_indices();
    }
    CHECK(differs);
  }
  SUBCASE("ten passes draw each sample ten times") {
    for (int batch : {1, 4, 5, 12}) {
      BatchIterator it(ds, batch, 8, false);
      std::vector<int> count(12, 0);
      for (int drawn = 0; drawn < 120; drawn += batch) {
        for (auto i : it.next_indices()) ++count[static_cast<std::size_t>(i)];
      }
      CAPTURE(batch);
      for (int c : count) CHECK(c == 10);
    }
  }
  SUBCASE("batches carry the indexed samples") {
    BatchIterator it(ds, 3, 2, true);
    const Batch b = it.next();
    CHECK(b.images.shape() == Shape{3, 3, 64, 64});
    CHECK(b.labels->shape() == Shape{3, 64, 64});
    CHECK(b.images[0] == ds.images[b.indices[0] * 3 * 64 * 64]);
    CHECK((*b.labels)[64 * 64 + 17] == (*ds.labels)[b.indices[1] * 64 * 64 + 17]);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(BatchIterator(ds, 13, 1, true), std::invalid_argument);
    CHECK_THROWS_AS(BatchIterator(ds, 0, 1, true), std::invalid_argument);
    auto target = etm_toy_preset()[1];
    target.train_samples = 4;
    const auto unlabeled = generate_domain(target, 1);
    CHECK_THROWS_AS(BatchIterator(unlabeled, 2, 1, true), std::invalid_argument);
    CHECK_NOTHROW(BatchIterator(unlabeled, 2, 1, false));
  }
}
