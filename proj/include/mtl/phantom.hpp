#pragma once

// Seeded synthetic mammography phantoms: smooth breast-like background plus
// rasterized lesions with exact ground-truth masks, and the on-disk dataset
// (8-bit PGM images/masks + index.csv).

#include <array>
#include <filesystem>

#include "mtl/tensor.hpp"

namespace mtl {

constexpr int kSegClasses = 5;
// mask classes: 0 healthy, 1 benign mass, 2 malignant mass,
//               3 benign calcification, 4 malignant calcification

struct PhantomConfig {
  int image_h = 64;
  int image_w = 64;
  double lesion_rate = 1.2;  // Poisson mean per image
  std::array<double, 4> class_ratios = {0.25, 0.25, 0.25, 0.25};  // over classes 1..4
  double noise_sigma = 0.03;
  uint64_t seed = 0;

  // Cue knobs: malignant lesions are brighter and (for masses) more
  // eccentric by construction, so the image-level label is learnable.
  double mass_radius_lo = 4.0, mass_radius_hi = 8.0;      // px at 64x64, scales with size
  double benign_mass_amp = 0.30, malignant_mass_amp = 0.60;
  double benign_mass_elong_lo = 1.05, benign_mass_elong_hi = 1.4;
  double malignant_mass_elong_lo = 1.9, malignant_mass_elong_hi = 2.8;
  double benign_calc_amp = 0.45, malignant_calc_amp = 0.80;
  int benign_calc_speckles_lo = 3, benign_calc_speckles_hi = 5;
  int malignant_calc_speckles_lo = 6, malignant_calc_speckles_hi = 9;
  double calc_cluster_radius = 3.0;

  void validate() const;
};

struct Sample {
  Tensor<float> image;        // [1,H,W], values in [0,1]
  std::vector<uint8_t> mask;  // H*W class indices
  int label = 0;              // 1 iff mask contains class 2 or 4

  int derive_label() const {
    for (uint8_t v : mask)
      if (v == 2 || v == 4) return 1;
    return 0;
  }
};

// Deterministic function of (config.seed, index).
Sample generate_sample(const PhantomConfig& cfg, int index);

struct DatasetSummary {
  int n_samples = 0;
  double prevalence = 0.0;                          // fraction with label 1
  std::array<double, kSegClasses> pixel_fraction{};  // per-class pixel share
};

DatasetSummary summarize(const std::vector<Sample>& samples);

struct Dataset {
  std::vector<Sample> train, test;
  int h = 0, w = 0;
};

// Writes images/ masks/ and index.csv (header image,mask,label,split).
// Train samples use generation indices [0, n_train), test samples
// [n_train, n_train + n_test), so the splits are disjoint by construction.
DatasetSummary write_dataset(const PhantomConfig& cfg, int n_train, int n_test,
                             const std::filesystem::path& dir);

// Re-derives every label from its mask and rejects on any inconsistency.
Dataset load_dataset(const std::filesystem::path& dir);

// 8-bit binary PGM (P5, maxval 255), row-major bytes.
void write_pgm(const std::filesystem::path& path, int w, int h, const uint8_t* bytes);
std::vector<uint8_t> read_pgm(const std::filesystem::path& path, int& w, int& h);

struct io_error : std::runtime_error {
  explicit io_error(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace mtl
