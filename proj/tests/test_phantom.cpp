#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mtl/phantom.hpp"

using namespace mtl;
namespace fs = std::filesystem;

namespace {
fs::path scratch_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "mtlseg_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("lesion_rate zero means empty masks and label zero") {
  PhantomConfig cfg;
  cfg.lesion_rate = 0.0;
  cfg.seed = 3;
  for (int i = 0; i < 10; ++i) {
    Sample s = generate_sample(cfg, i);
    CHECK(s.label == 0);
    for (uint8_t v : s.mask) CHECK(v == 0);
  }
}

TEST_CASE("generation is a pure function of (seed, index)") {
  PhantomConfig cfg;
  cfg.seed = 99;
  Sample a = generate_sample(cfg, 7);
  Sample b = generate_sample(cfg, 7);
  CHECK(*a.image.data == *b.image.data);
  CHECK(a.mask == b.mask);
  CHECK(a.label == b.label);
  Sample c = generate_sample(cfg, 8);
  CHECK(*a.image.data != *c.image.data);
}

TEST_CASE("labels always agree with masks and values stay in range") {
  PhantomConfig cfg;
  cfg.seed = 5;
  for (int i = 0; i < 200; ++i) {
    Sample s = generate_sample(cfg, i);
    CHECK(s.label == s.derive_label());
    for (uint8_t v : s.mask) CHECK(v < kSegClasses);
    for (int64_t j = 0; j < s.image.numel(); ++j) {
      CHECK(s.image[j] >= 0.0f);
      CHECK(s.image[j] <= 1.0f);
    }
  }
}

TEST_CASE("prevalence tracks the Poisson-thinning prediction over 10k samples") {
  PhantomConfig cfg;
  cfg.seed = 17;
  std::vector<Sample> samples;
  samples.reserve(10000);
  for (int i = 0; i < 10000; ++i) samples.push_back(generate_sample(cfg, i));
  DatasetSummary sm = summarize(samples);
  double p_malignant = cfg.class_ratios[1] + cfg.class_ratios[3];
  double expected = 1.0 - std::exp(-cfg.lesion_rate * p_malignant);
  CHECK(std::abs(sm.prevalence - expected) < 0.03);
  // the imbalance motivating the weighted loss is real
  CHECK(sm.pixel_fraction[0] > 0.90);
}

TEST_CASE("pgm round trip and header tolerance") {
  auto dir = scratch_dir("pgm");
  std::vector<uint8_t> bytes(12 * 7);
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = (uint8_t)(i * 3);
  write_pgm(dir / "a.pgm", 12, 7, bytes.data());
  int w, h;
  auto back = read_pgm(dir / "a.pgm", w, h);
  CHECK(w == 12);
  CHECK(h == 7);
  CHECK(back == bytes);

  {  // comments in the header are part of the format
    std::ofstream f(dir / "c.pgm", std::ios::binary);
    f << "P5\n# a comment\n2 2\n255\n";
    f.write("\x01\x02\x03\x04", 4);
  }
  auto c = read_pgm(dir / "c.pgm", w, h);
  CHECK(c == std::vector<uint8_t>{1, 2, 3, 4});

  {
    std::ofstream f(dir / "bad_magic.pgm", std::ios::binary);
    f << "P6\n2 2\n255\n....";
  }
  CHECK_THROWS_AS(read_pgm(dir / "bad_magic.pgm", w, h), io_error);
  {
    std::ofstream f(dir / "short.pgm", std::ios::binary);
    f << "P5\n4 4\n255\n..";
  }
  CHECK_THROWS_AS(read_pgm(dir / "short.pgm", w, h), io_error);
  {
    std::ofstream f(dir / "depth.pgm", std::ios::binary);
    f << "P5\n1 1\n65535\n..";
  }
  CHECK_THROWS_AS(read_pgm(dir / "depth.pgm", w, h), io_error);
}

TEST_CASE("dataset write/load round trip") {
  auto dir = scratch_dir("roundtrip");
  PhantomConfig cfg;
  cfg.seed = 11;
  write_dataset(cfg, 6, 3, dir);
  Dataset ds = load_dataset(dir);
  REQUIRE(ds.train.size() == 6);
  REQUIRE(ds.test.size() == 3);
  CHECK(ds.h == cfg.image_h);

  // masks exact, images within the 8-bit quantization step
  for (int i = 0; i < 6; ++i) {
    Sample orig = generate_sample(cfg, i);
    CHECK(ds.train[i].mask == orig.mask);
    CHECK(ds.train[i].label == orig.label);
    for (int64_t j = 0; j < orig.image.numel(); ++j)
      CHECK(std::abs(ds.train[i].image[j] - orig.image[j]) <= 1.0f / 255.0f);
  }
  // test split continues the index range
  Sample t0 = generate_sample(cfg, 6);
  CHECK(ds.test[0].mask == t0.mask);
}

TEST_CASE("loader rejects a tampered label") {
  auto dir = scratch_dir("tamper_label");
  PhantomConfig cfg;
  cfg.seed = 23;
  cfg.lesion_rate = 3.0;  // make a malignant sample likely
  write_dataset(cfg, 8, 2, dir);

  // flip every label in the csv
  std::ifstream in(dir / "index.csv");
  std::string all((std::istreambuf_iterator<char>(in)), {});
  in.close();
  std::string flipped;
  for (size_t i = 0; i < all.size(); ++i) {
    if (all[i] == ',' && i + 2 < all.size() && (all[i + 1] == '0' || all[i + 1] == '1') &&
        all[i + 2] == ',') {
      flipped += ',';
      flipped += all[i + 1] == '0' ? '1' : '0';
      ++i;
    } else {
      flipped += all[i];
    }
  }
  std::ofstream out(dir / "index.csv", std::ios::binary);
  out << flipped;
  out.close();
  CHECK_THROWS_AS(load_dataset(dir), io_error);
}

TEST_CASE("loader rejects out-of-range mask values") {
  auto dir = scratch_dir("tamper_mask");
  PhantomConfig cfg;
  cfg.seed = 31;
  write_dataset(cfg, 2, 1, dir);
  std::vector<uint8_t> bad((size_t)cfg.image_h * cfg.image_w, 9);
  write_pgm(dir / "masks" / "train_00000.pgm", cfg.image_w, cfg.image_h, bad.data());
  CHECK_THROWS_AS(load_dataset(dir), io_error);
}

TEST_CASE("dataset writes are byte-deterministic") {
  PhantomConfig cfg;
  cfg.seed = 41;
  auto d1 = scratch_dir("det1");
  auto d2 = scratch_dir("det2");
  write_dataset(cfg, 4, 2, d1);
  write_dataset(cfg, 4, 2, d2);
  for (auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    auto rel = fs::relative(entry.path(), d1);
    std::ifstream a(entry.path(), std::ios::binary), b(d2 / rel, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }
}

TEST_CASE("malignant cues are visible in the image statistics") {
  // malignant lesions are brighter by construction, so mean intensity over
  // lesion support should separate the classes on average
  PhantomConfig cfg;
  cfg.seed = 57;
  cfg.lesion_rate = 1.0;
  double benign_sum = 0, malig_sum = 0;
  int64_t benign_n = 0, malig_n = 0;
  for (int i = 0; i < 400; ++i) {
    Sample s = generate_sample(cfg, i);
    for (size_t j = 0; j < s.mask.size(); ++j) {
      if (s.mask[j] == 1 || s.mask[j] == 3) {
        benign_sum += s.image[j];
        ++benign_n;
      } else if (s.mask[j] == 2 || s.mask[j] == 4) {
        malig_sum += s.image[j];
        ++malig_n;
      }
    }
  }
  REQUIRE(benign_n > 0);
  REQUIRE(malig_n > 0);
  CHECK(malig_sum / malig_n > benign_sum / benign_n + 0.05);
}
