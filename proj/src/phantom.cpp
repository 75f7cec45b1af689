#include "mtl/phantom.hpp"

#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace mtl {

void PhantomConfig::validate() const {
  check(image_h >= 8 && image_w >= 8, "phantom image dims must be >= 8");
  check(lesion_rate >= 0.0, "lesion_rate must be >= 0");
  double s = 0.0;
  for (double r : class_ratios) {
    check(r >= 0.0, "class ratios must be >= 0");
    s += r;
  }
  check(std::abs(s - 1.0) < 1e-9, "class ratios must sum to 1, got " + std::to_string(s));
  check(noise_sigma >= 0.0, "noise_sigma must be >= 0");
  check(mass_radius_lo > 0 && mass_radius_hi >= mass_radius_lo, "bad mass radius range");
  check(calc_cluster_radius > 0, "calc_cluster_radius must be > 0");
}

namespace {

int poisson_draw(Rng& rng, double rate) {
  // Knuth; fine for the small rates used here
  double limit = std::exp(-rate);
  int k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= rng.uniform();
  } while (p > limit);
  return k - 1;
}

int categorical_draw(Rng& rng, const std::array<double, 4>& probs) {
  double u = rng.uniform();
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return 3;
}

struct Canvas {
  int h, w;
  std::vector<float>& img;
  std::vector<uint8_t>& mask;

  void splat(int y, int x, double v, uint8_t cls) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    img[(size_t)y * w + x] += (float)v;
    mask[(size_t)y * w + x] = cls;
  }
};

void draw_mass(Canvas& cv, Rng& rng, const PhantomConfig& cfg, double cy, double cx,
               bool malignant, uint8_t cls) {
  double scale = std::min(cv.h, cv.w) / 64.0;
  double r = rng.uniform(cfg.mass_radius_lo, cfg.mass_radius_hi) * scale;
  double elong = malignant ? rng.uniform(cfg.malignant_mass_elong_lo, cfg.malignant_mass_elong_hi)
                           : rng.uniform(cfg.benign_mass_elong_lo, cfg.benign_mass_elong_hi);
  double a = r * std::sqrt(elong), b = r / std::sqrt(elong);
  double theta = rng.uniform(0.0, 3.14159265358979323846);
  double amp = (malignant ? cfg.malignant_mass_amp : cfg.benign_mass_amp) * rng.uniform(0.85, 1.15);
  double ct = std::cos(theta), st = std::sin(theta);
  int lo_y = (int)std::floor(cy - a - 1), hi_y = (int)std::ceil(cy + a + 1);
  int lo_x = (int)std::floor(cx - a - 1), hi_x = (int)std::ceil(cx + a + 1);
  for (int y = lo_y; y <= hi_y; ++y)
    for (int x = lo_x; x <= hi_x; ++x) {
      double dy = y - cy, dx = x - cx;
      double u = ct * dx + st * dy, v = -st * dx + ct * dy;
      double d2 = (u / a) * (u / a) + (v / b) * (v / b);
      if (d2 <= 1.0) cv.splat(y, x, amp * std::pow(1.0 - d2, 1.2), cls);
    }
}

void draw_calc_cluster(Canvas& cv, Rng& rng, const PhantomConfig& cfg, double cy, double cx,
                       bool malignant, uint8_t cls) {
  double scale = std::min(cv.h, cv.w) / 64.0;
  int lo = malignant ? cfg.malignant_calc_speckles_lo : cfg.benign_calc_speckles_lo;
  int hi = malignant ? cfg.malignant_calc_speckles_hi : cfg.benign_calc_speckles_hi;
  int n = lo + (int)rng.below((uint64_t)(hi - lo + 1));
  double amp_base = malignant ? cfg.malignant_calc_amp : cfg.benign_calc_amp;
  double radius = cfg.calc_cluster_radius * scale;
  for (int i = 0; i < n; ++i) {
    double ang = rng.uniform(0.0, 6.28318530717958648);
    double rr = radius * std::sqrt(rng.uniform());
    int sy = (int)std::lround(cy + rr * std::sin(ang));
    int sx = (int)std::lround(cx + rr * std::cos(ang));
    int size = 1 + (int)rng.below(3);  // speckles 1-3 px across
    double amp = amp_base * rng.uniform(0.9, 1.1);
    for (int y = sy; y < sy + size; ++y)
      for (int x = sx; x < sx + size; ++x) cv.splat(y, x, amp, cls);
  }
}

}  // namespace

Sample generate_sample(const PhantomConfig& cfg, int index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, stream::data, (uint64_t)index));
  const int h = cfg.image_h, w = cfg.image_w;

  std::vector<float> img((size_t)h * w, 0.0f);
  std::vector<uint8_t> mask((size_t)h * w, 0);

  // breast-shaped vignette: bright tissue ellipse fading toward the edges
  double bcy = h * rng.uniform(0.45, 0.55);
  double bcx = w * rng.uniform(0.42, 0.52);
  double bay = h * rng.uniform(0.40, 0.48);
  double bax = w * rng.uniform(0.40, 0.48);
  // low-frequency texture field
  struct Wave {
    double ky, kx, phase, amp;
  };
  std::array<Wave, 3> waves;
  for (auto& wv : waves) {
    double wavelen = rng.uniform(0.5, 1.5) * w;
    double dir = rng.uniform(0.0, 6.28318530717958648);
    wv = {std::sin(dir) * 6.28318530717958648 / wavelen,
          std::cos(dir) * 6.28318530717958648 / wavelen, rng.uniform(0.0, 6.28318530717958648),
          rng.uniform(0.02, 0.05)};
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dy = (y - bcy) / bay, dx = (x - bcx) / bax;
      double d = std::sqrt(dy * dy + dx * dx);
      double body = d < 1.0 ? 0.30 * (1.0 - 0.5 * d * d) : 0.30 * 0.5 * std::exp(-4.0 * (d - 1.0));
      double tex = 0.0;
      for (const auto& wv : waves) tex += wv.amp * std::cos(wv.ky * y + wv.kx * x + wv.phase);
      img[(size_t)y * w + x] = (float)(0.10 + body + tex);
    }

  Canvas cv{h, w, img, mask};
  int n_lesions = poisson_draw(rng, cfg.lesion_rate);
  for (int i = 0; i < n_lesions; ++i) {
    uint8_t cls = (uint8_t)(1 + categorical_draw(rng, cfg.class_ratios));
    // keep lesion centers inside the tissue ellipse
    double cy = bcy, cx = bcx;
    for (int tries = 0; tries < 64; ++tries) {
      double ty = rng.uniform(0.12 * h, 0.88 * h);
      double tx = rng.uniform(0.12 * w, 0.88 * w);
      double dy = (ty - bcy) / bay, dx = (tx - bcx) / bax;
      if (dy * dy + dx * dx < 0.7) {
        cy = ty;
        cx = tx;
        break;
      }
    }
    bool malignant = cls == 2 || cls == 4;
    if (cls <= 2)
      draw_mass(cv, rng, cfg, cy, cx, malignant, cls);
    else
      draw_calc_cluster(cv, rng, cfg, cy, cx, malignant, cls);
  }

  for (auto& v : img) {
    v += (float)(cfg.noise_sigma * rng.normal());
    v = std::min(1.0f, std::max(0.0f, v));
  }

  Sample s;
  s.image = Tensor<float>(Shape{1, h, w}, std::move(img));
  s.mask = std::move(mask);
  s.label = s.derive_label();
  return s;
}

DatasetSummary summarize(const std::vector<Sample>& samples) {
  DatasetSummary sm;
  sm.n_samples = (int)samples.size();
  if (samples.empty()) return sm;
  int64_t pos = 0;
  std::array<int64_t, kSegClasses> counts{};
  int64_t total = 0;
  for (const auto& s : samples) {
    pos += s.label;
    for (uint8_t v : s.mask) ++counts[v];
    total += (int64_t)s.mask.size();
  }
  sm.prevalence = (double)pos / sm.n_samples;
  for (int k = 0; k < kSegClasses; ++k) sm.pixel_fraction[k] = (double)counts[k] / (double)total;
  return sm;
}

// ---------------------------------------------------------------------------
// PGM P5

void write_pgm(const fs::path& path, int w, int h, const uint8_t* bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for write: " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write((const char*)bytes, (std::streamsize)w * h);
  if (!out) throw io_error("short write: " + path.string());
}

namespace {
int pgm_token(std::istream& in, const fs::path& path) {
  // skips whitespace and '#' comments per the PGM grammar
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
    } else if (!std::isspace(c)) {
      in.unget();
      break;
    }
  }
  int v;
  if (!(in >> v)) throw io_error("corrupt PGM header: " + path.string());
  return v;
}
}  // namespace

std::vector<uint8_t> read_pgm(const fs::path& path, int& w, int& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open: " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5')
    throw io_error("not a binary PGM (want P5): " + path.string());
  w = pgm_token(in, path);
  h = pgm_token(in, path);
  int maxval = pgm_token(in, path);
  if (w <= 0 || h <= 0) throw io_error("bad PGM dims in " + path.string());
  if (maxval != 255) throw io_error("unsupported PGM maxval " + std::to_string(maxval) + " in " + path.string());
  in.get();  // single whitespace after maxval
  std::vector<uint8_t> bytes((size_t)w * h);
  in.read((char*)bytes.data(), (std::streamsize)bytes.size());
  if (in.gcount() != (std::streamsize)bytes.size())
    throw io_error("truncated PGM payload: " + path.string());
  return bytes;
}

// ---------------------------------------------------------------------------
// dataset files

namespace {
std::string sample_stem(const std::string& split, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05d", split.c_str(), i);
  return buf;
}
}  // namespace

DatasetSummary write_dataset(const PhantomConfig& cfg, int n_train, int n_test, const fs::path& dir) {
  cfg.validate();
  check(n_train >= 0 && n_test >= 0 && n_train + n_test > 0, "dataset needs at least one sample");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw io_error("cannot create dataset dirs under " + dir.string());

  std::ofstream csv(dir / "index.csv", std::ios::binary);  // binary keeps LF endings
  if (!csv) throw io_error("cannot write " + (dir / "index.csv").string());
  csv << "image,mask,label,split\n";

  std::vector<Sample> all;
  all.reserve((size_t)n_train + n_test);
  auto emit = [&](const std::string& split, int within, int gen_index) {
    Sample s = generate_sample(cfg, gen_index);
    std::string stem = sample_stem(split, within);
    std::vector<uint8_t> q(s.image.numel());
    for (int64_t i = 0; i < s.image.numel(); ++i)
      q[i] = (uint8_t)std::lround(std::min(1.0f, std::max(0.0f, s.image[i])) * 255.0f);
    write_pgm(dir / "images" / (stem + ".pgm"), cfg.image_w, cfg.image_h, q.data());
    write_pgm(dir / "masks" / (stem + ".pgm"), cfg.image_w, cfg.image_h, s.mask.data());
    csv << "images/" << stem << ".pgm,masks/" << stem << ".pgm," << s.label << "," << split << "\n";
    all.push_back(std::move(s));
  };
  for (int i = 0; i < n_train; ++i) emit("train", i, i);
  for (int i = 0; i < n_test; ++i) emit("test", i, n_train + i);
  csv.flush();
  if (!csv) throw io_error("short write: " + (dir / "index.csv").string());
  return summarize(all);
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream csv(dir / "index.csv");
  if (!csv) throw io_error("cannot open " + (dir / "index.csv").string());
  std::string line;
  if (!std::getline(csv, line) || line != "image,mask,label,split")
    throw io_error("bad index.csv header in " + dir.string() + ": '" + line + "'");

  Dataset ds;
  int lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string img_rel, mask_rel, label_s, split;
    if (!std::getline(ss, img_rel, ',') || !std::getline(ss, mask_rel, ',') ||
        !std::getline(ss, label_s, ',') || !std::getline(ss, split))
      throw io_error("malformed row " + std::to_string(lineno) + " in " + (dir / "index.csv").string());
    if (split != "train" && split != "test")
      throw io_error("unknown split '" + split + "' at row " + std::to_string(lineno) + " in " +
                     (dir / "index.csv").string());

    int iw, ih, mw, mh;
    auto img_path = dir / img_rel;
    auto mask_path = dir / mask_rel;
    std::vector<uint8_t> ib = read_pgm(img_path, iw, ih);
    std::vector<uint8_t> mb = read_pgm(mask_path, mw, mh);
    if (iw != mw || ih != mh)
      throw io_error("image/mask size mismatch for " + img_path.string());
    if (ds.h == 0) {
      ds.h = ih;
      ds.w = iw;
    } else if (ih != ds.h || iw != ds.w) {
      throw io_error("inconsistent sample size in " + img_path.string());
    }
    for (size_t i = 0; i < mb.size(); ++i)
      if (mb[i] >= kSegClasses)
        throw io_error("mask value " + std::to_string(mb[i]) + " out of range in " +
                       mask_path.string());

    Sample s;
    std::vector<float> fimg(ib.size());
    for (size_t i = 0; i < ib.size(); ++i) fimg[i] = (float)ib[i] / 255.0f;
    s.image = Tensor<float>(Shape{1, ih, iw}, std::move(fimg));
    s.mask = std::move(mb);
    s.label = s.derive_label();
    int csv_label = std::stoi(label_s);
    if (csv_label != s.label)
      throw io_error("label " + label_s + " inconsistent with mask content of " +
                     mask_path.string() + " (mask implies " + std::to_string(s.label) + ")");
    (split == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  check(!ds.train.empty() || !ds.test.empty(), "dataset at " + dir.string() + " is empty");
  return ds;
}

}  // namespace mtl
