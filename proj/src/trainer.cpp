#include "mtl/trainer.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace mtl {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::cls_baseline: return "cls_baseline";
    case Strategy::seg_baseline: return "seg_baseline";
    case Strategy::sequential: return "sequential";
    case Strategy::joint: return "joint";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "cls_baseline") return Strategy::cls_baseline;
  if (s == "seg_baseline") return Strategy::seg_baseline;
  if (s == "sequential") return Strategy::sequential;
  if (s == "joint") return Strategy::joint;
  throw config_error("unknown strategy '" + s +
                     "' (expected cls_baseline|seg_baseline|sequential|joint)");
}

void TrainConfig::validate() const {
  if (lambda < 0.0 || lambda > 1.0)
    throw config_error("lambda must be in [0,1], got " + std::to_string(lambda));
  if (lr <= 0.0) throw config_error("lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw config_error("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
  if (epochs < 1) throw config_error("epochs must be >= 1");
  if (batch_size < 1) throw config_error("batch_size must be >= 1");
  if (k_classes < 2) throw config_error("k_classes must be >= 2");
  if (strategy == Strategy::sequential &&
      (sequential_phase1_epochs < 1 || sequential_phase1_epochs >= epochs))
    throw config_error("sequential needs 1 <= phase1 epochs < epochs, got " +
                       std::to_string(sequential_phase1_epochs) + " of " + std::to_string(epochs));
  backbone.validate();
}

// ---------------------------------------------------------------------------
// EvalReport CSV

namespace {
std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}
}  // namespace

std::string EvalReport::csv_header() const {
  return "strategy,mean_dice,dice_c0,dice_c1,dice_c2,dice_c3,dice_c4,auc,wall_seconds";
}

std::string EvalReport::csv_row() const {
  std::ostringstream os;
  os << strategy << ",";
  os << (mean_dice ? fmt_g(*mean_dice) : "") << ",";
  for (int k = 0; k < kSegClasses; ++k) {
    bool have = mean_dice && k < (int)dice_present.size() && dice_present[k];
    os << (have ? fmt_g(per_class_dice[k]) : "") << ",";
  }
  os << (auc ? fmt_g(*auc) : "") << ",";
  os << fmt_g(wall_seconds);
  return os.str();
}

EvalReport parse_report_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open report " + path.string());
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row))
    throw io_error("report " + path.string() + " is missing header or data row");
  EvalReport ref;
  if (header != ref.csv_header())
    throw io_error("report " + path.string() + " has unexpected header '" + header + "'");
  std::vector<std::string> cells;
  std::stringstream ss(row);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  cells.resize(9);
  EvalReport r;
  r.strategy = cells[0];
  if (!cells[1].empty()) r.mean_dice = std::stod(cells[1]);
  r.per_class_dice.assign(kSegClasses, std::numeric_limits<double>::quiet_NaN());
  r.dice_present.assign(kSegClasses, false);
  for (int k = 0; k < kSegClasses; ++k)
    if (!cells[2 + k].empty()) {
      r.per_class_dice[k] = std::stod(cells[2 + k]);
      r.dice_present[k] = true;
    }
  if (!cells[7].empty()) r.auc = std::stod(cells[7]);
  if (!cells[8].empty()) r.wall_seconds = std::stod(cells[8]);
  return r;
}

// ---------------------------------------------------------------------------
// SGD with momentum and coupled weight decay.

void sgd_step(std::vector<Tensor<float>*>& params,
              const std::vector<const std::vector<float>*>& grads,
              std::vector<std::vector<float>>& velocity, double lr, double momentum,
              double weight_decay) {
  check(params.size() == grads.size() && params.size() == velocity.size(),
        "sgd_step: params/grads/state must align one-to-one");
  const float flr = (float)lr, fm = (float)momentum, fwd = (float)weight_decay;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i]->data;
    const auto& g = *grads[i];
    auto& v = velocity[i];
    check(p.size() == g.size() && p.size() == v.size(), "sgd_step: buffer size mismatch");
    for (size_t j = 0; j < p.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw divergence_error("non-finite gradient in parameter " + std::to_string(i) +
                               " at element " + std::to_string(j));
      v[j] = fm * v[j] + g[j] + fwd * p[j];
      p[j] -= flr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint format

namespace {

constexpr char kMagic[4] = {'M', 'T', 'L', 'C'};
constexpr uint32_t kVersion = 1;
constexpr const char* kMetaName = "__meta__";

void put_u32(std::ostream& out, uint32_t v) {
  char b[4] = {(char)(v & 0xff), (char)((v >> 8) & 0xff), (char)((v >> 16) & 0xff),
               (char)((v >> 24) & 0xff)};
  out.write(b, 4);
}

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }

struct ByteReader {
  std::ifstream in;
  int64_t offset = 0;
  std::string path;

  explicit ByteReader(const fs::path& p) : in(p, std::ios::binary), path(p.string()) {
    if (!in) throw io_error("cannot open checkpoint " + path);
  }

  void bytes(char* dst, int64_t n, const char* what) {
    in.read(dst, n);
    if (in.gcount() != n)
      throw io_error("checkpoint " + path + " truncated reading " + what + " at byte offset " +
                     std::to_string(offset));
    offset += n;
  }

  uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes((char*)b, 4, what);
    return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  bool at_eof() {
    in.peek();
    return in.eof();
  }
};

std::vector<float> meta_payload(const BackboneConfig& cfg, int k) {
  std::vector<float> m = {1.0f, (float)cfg.in_channels, (float)cfg.stem_channels,
                          (float)cfg.stem_stride, (float)cfg.stages.size()};
  for (const auto& st : cfg.stages) {
    m.push_back((float)st.blocks);
    m.push_back((float)st.channels);
    m.push_back((float)st.stride);
  }
  m.push_back((float)k);
  return m;
}

void write_entry(std::ostream& out, const std::string& name, const Shape& shape,
                 const std::vector<float>& data) {
  put_u32(out, (uint32_t)name.size());
  out.write(name.data(), (std::streamsize)name.size());
  put_u32(out, (uint32_t)shape.size());
  for (int d : shape) put_u32(out, (uint32_t)d);
  for (float v : data) put_f32(out, v);
}

}  // namespace

void save_checkpoint(const MtlModel<float>& model, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  uint32_t count = 1 + (uint32_t)model.params().size() + (uint32_t)model.buffers().size();
  put_u32(out, count);
  std::vector<float> meta = meta_payload(model.config(), model.k_classes());
  write_entry(out, kMetaName, Shape{(int)meta.size()}, meta);
  for (const auto& np : model.params()) write_entry(out, np.name, np.t.shape, *np.t.data);
  for (const auto& nb : model.buffers()) write_entry(out, nb.name, nb.t.shape, *nb.t.data);
  out.flush();
  if (!out) throw io_error("short write on checkpoint " + path.string());
}

int64_t checkpoint_byte_size(const MtlModel<float>& model) {
  auto entry = [](size_t name_len, const Shape& shape) {
    return 4 + (int64_t)name_len + 4 + 4 * (int64_t)shape.size() + 4 * shape_numel(shape);
  };
  std::vector<float> meta = meta_payload(model.config(), model.k_classes());
  int64_t n = 12 + entry(std::strlen(kMetaName), Shape{(int)meta.size()});
  for (const auto& np : model.params()) n += entry(np.name.size(), np.t.shape);
  for (const auto& nb : model.buffers()) n += entry(nb.name.size(), nb.t.shape);
  return n;
}

MtlModel<float> load_checkpoint(const fs::path& path) {
  ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw io_error("checkpoint " + path.string() + " has bad magic (want MTLC)");
  uint32_t version = r.u32("version");
  if (version != kVersion)
    throw io_error("checkpoint " + path.string() + " has unsupported version " +
                   std::to_string(version));
  uint32_t count = r.u32("tensor count");

  std::vector<std::pair<std::string, Tensor<float>>> entries;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.u32("name length");
    if (name_len == 0 || name_len > 4096)
      throw io_error("checkpoint " + path.string() + ": implausible name length " +
                     std::to_string(name_len) + " at byte offset " + std::to_string(r.offset - 4));
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "tensor name");
    uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8)
      throw io_error("checkpoint " + path.string() + ": implausible rank " + std::to_string(rank) +
                     " for tensor " + name);
    Shape shape(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = (int)r.u32("dim");
      if (shape[d] <= 0 || numel > (1 << 28))
        throw io_error("checkpoint " + path.string() + ": bad dims for tensor " + name);
      numel *= shape[d];
    }
    std::vector<float> data((size_t)numel);
    for (auto& v : data) v = r.f32("payload");
    entries.emplace_back(std::move(name), Tensor<float>(shape, std::move(data)));
  }
  if (!r.at_eof())
    throw io_error("checkpoint " + path.string() + " has trailing bytes after offset " +
                   std::to_string(r.offset));
  if (entries.empty() || entries[0].first != kMetaName)
    throw io_error("checkpoint " + path.string() + " is missing the leading " + kMetaName +
                   " tensor");

  const auto& meta = *entries[0].second.data;
  if (meta.size() < 6 || meta[0] != 1.0f)
    throw io_error("checkpoint " + path.string() + " has an unsupported meta record");
  BackboneConfig cfg;
  cfg.in_channels = (int)meta[1];
  cfg.stem_channels = (int)meta[2];
  cfg.stem_stride = (int)meta[3];
  int n_stages = (int)meta[4];
  if ((int)meta.size() != 6 + 3 * n_stages)
    throw io_error("checkpoint " + path.string() + " meta record length mismatch");
  cfg.stages.clear();
  for (int s = 0; s < n_stages; ++s)
    cfg.stages.push_back(StageSpec{(int)meta[5 + 3 * s], (int)meta[6 + 3 * s], (int)meta[7 + 3 * s]});
  int k = (int)meta.back();

  MtlModel<float> model(cfg, k);
  size_t next = 1;
  auto fill = [&](std::vector<MtlModel<float>::Named>& dst) {
    for (auto& np : dst) {
      if (next >= entries.size())
        throw io_error("checkpoint " + path.string() + " is missing tensor " + np.name);
      auto& [name, t] = entries[next++];
      if (name != np.name)
        throw io_error("checkpoint " + path.string() + ": expected tensor " + np.name + ", found " +
                       name);
      if (t.shape != np.t.shape)
        throw io_error("checkpoint " + path.string() + ": tensor " + name + " has shape " +
                       shape_str(t.shape) + ", config requires " + shape_str(np.t.shape));
      *np.t.data = *t.data;
    }
  };
  fill(model.params());
  fill(model.buffers());
  if (next != entries.size())
    throw io_error("checkpoint " + path.string() + " contains " +
                   std::to_string(entries.size() - next) + " unexpected extra tensors");
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct Batch {
  Tensor<float> images;
  std::vector<uint8_t> masks;
  std::vector<int> labels;
  int n = 0;
};

Batch make_batch(const std::vector<Sample>& samples, const std::vector<int>& order, size_t lo,
                 size_t hi) {
  Batch b;
  b.n = (int)(hi - lo);
  const auto& first = samples[order[lo]].image;
  const int h = first.shape[1], w = first.shape[2];
  b.images = Tensor<float>(Shape{b.n, 1, h, w});
  b.masks.resize((size_t)b.n * h * w);
  b.labels.resize(b.n);
  for (size_t i = lo; i < hi; ++i) {
    const Sample& s = samples[order[i]];
    check(s.image.shape[1] == h && s.image.shape[2] == w, "inconsistent sample sizes in batch");
    std::memcpy(b.images.ptr() + (i - lo) * (int64_t)h * w, s.image.ptr(),
                sizeof(float) * (size_t)h * w);
    std::memcpy(b.masks.data() + (i - lo) * (size_t)h * w, s.mask.data(), (size_t)h * w);
    b.labels[i - lo] = s.label;
  }
  return b;
}

std::vector<int> iota_order(size_t n) {
  std::vector<int> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = (int)i;
  return v;
}

}  // namespace

EvalReport evaluate(const MtlModel<float>& model, const std::vector<Sample>& samples,
                    const ClassWeights<float>& weights, bool want_dice, bool want_auc) {
  check(!samples.empty(), "evaluate: empty sample set");
  const int K = model.k_classes();
  EvalReport rep;
  rep.per_class_dice.assign(kSegClasses, std::numeric_limits<double>::quiet_NaN());
  rep.dice_present.assign(kSegClasses, false);

  std::vector<uint8_t> all_pred, all_gt;
  std::vector<double> scores;
  std::vector<int> labels;
  double bce_weighted = 0.0;
  double wce_num = 0.0, wce_z = 0.0;

  auto order = iota_order(samples.size());
  const size_t B = 16;
  for (size_t lo = 0; lo < samples.size(); lo += B) {
    size_t hi = std::min(samples.size(), lo + B);
    Batch b = make_batch(samples, order, lo, hi);
    Graph<float> g;
    auto bound = model.bind(g);
    Tensor<float> features = model.backbone_forward(g, bound, b.images, /*train=*/false);
    if (want_dice) {
      Tensor<float> seg = model.snet_forward(g, bound, features, b.images.shape[2], b.images.shape[3]);
      const int h = seg.shape[2], w = seg.shape[3];
      const int64_t hw = (int64_t)h * w;
      for (int n = 0; n < b.n; ++n)
        for (int64_t i = 0; i < hw; ++i) {
          const float* base = seg.ptr() + ((int64_t)n * K) * hw + i;
          int best = 0;
          float best_v = base[0];
          for (int k = 1; k < K; ++k)
            if (base[k * hw] > best_v) {
              best_v = base[k * hw];
              best = k;
            }
          all_pred.push_back((uint8_t)best);
        }
      all_gt.insert(all_gt.end(), b.masks.begin(), b.masks.end());
      double z = 0.0;
      for (uint8_t t : b.masks) z += (double)weights.w[t];
      double l = (double)weighted_ce(g, seg, b.masks, weights).item();
      wce_num += l * z;
      wce_z += z;
    }
    if (want_auc) {
      Tensor<float> cls = model.cnet_forward(g, bound, features);
      for (int n = 0; n < b.n; ++n) {
        double z = (double)cls[n];
        scores.push_back(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
        labels.push_back(b.labels[n]);
      }
      bce_weighted += (double)bce_with_logit(g, cls, b.labels).item() * b.n;
    }
  }

  if (want_dice) {
    DiceResult d = mean_dice(all_pred, all_gt, K);
    rep.mean_dice = d.mean;
    rep.per_class_dice = d.per_class;
    rep.dice_present = d.present;
    rep.l_seg = wce_z > 0 ? wce_num / wce_z : 0.0;
  }
  if (want_auc) {
    rep.l_cls = bce_weighted / (double)samples.size();
    int n_pos = 0;
    for (int v : labels) n_pos += v;
    if (n_pos == 0 || n_pos == (int)labels.size()) {
      rep.auc_warning = true;  // AUC undefined on a single-class split
    } else {
      rep.auc = roc_auc(scores, labels);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training strategies

namespace {

enum class Phase { seg, cls, joint };

struct EpochLog {
  std::ofstream out;

  explicit EpochLog(const fs::path& p) : out(p, std::ios::binary) {
    if (!out) throw io_error("cannot write log " + p.string());
    out << "epoch,step,l_cls,l_seg,l_total\n";
  }

  void row(int epoch, int step, std::optional<double> l_cls, std::optional<double> l_seg,
           double l_total) {
    out << epoch << "," << step << "," << (l_cls ? fmt_g(*l_cls) : "") << ","
        << (l_seg ? fmt_g(*l_seg) : "") << "," << fmt_g(l_total) << "\n";
  }
};

}  // namespace

RunResult run_strategy(const TrainConfig& cfg, const Dataset& data, const fs::path& out_dir,
                       const StepHook& hook) {
  cfg.validate();
  tune_allocator();
  if (data.train.empty() || data.test.empty())
    throw config_error("training needs both a train and a test split");
  if (data.h % cfg.backbone.total_stride() != 0 || data.w % cfg.backbone.total_stride() != 0)
    throw config_error("dataset resolution " + std::to_string(data.h) + "x" + std::to_string(data.w) +
                       " is not divisible by the backbone stride " +
                       std::to_string(cfg.backbone.total_stride()));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw io_error("cannot create output dir " + out_dir.string());

  auto t0 = std::chrono::steady_clock::now();

  std::vector<std::vector<uint8_t>> train_masks;
  train_masks.reserve(data.train.size());
  for (const auto& s : data.train) train_masks.push_back(s.mask);
  ClassWeights<float> weights = compute_class_weights<float>(train_masks, cfg.k_classes);

  Rng init_rng(mix_seed(cfg.seed, stream::init));
  MtlModel<float> model(cfg.backbone, cfg.k_classes, &init_rng);

  std::vector<Tensor<float>*> param_ptrs;
  std::vector<std::vector<float>> velocity;
  for (auto& np : model.params()) {
    param_ptrs.push_back(&np.t);
    velocity.emplace_back(np.t.numel(), 0.0f);
  }

  struct PhasePlan {
    Phase phase;
    int epoch_lo, epoch_hi;
    std::string log_name;
  };
  std::vector<PhasePlan> plan;
  switch (cfg.strategy) {
    case Strategy::cls_baseline:
      plan.push_back({Phase::cls, 0, cfg.epochs, "train_log.csv"});
      break;
    case Strategy::seg_baseline:
      plan.push_back({Phase::seg, 0, cfg.epochs, "train_log.csv"});
      break;
    case Strategy::joint:
      plan.push_back({Phase::joint, 0, cfg.epochs, "train_log.csv"});
      break;
    case Strategy::sequential:
      plan.push_back({Phase::seg, 0, cfg.sequential_phase1_epochs, "train_log_phase1.csv"});
      plan.push_back({Phase::cls, cfg.sequential_phase1_epochs, cfg.epochs, "train_log_phase2.csv"});
      break;
  }

  int global_step = 0;
  std::optional<EvalReport> phase1_eval;

  for (const PhasePlan& pp : plan) {
    EpochLog log(out_dir / pp.log_name);
    for (int epoch = pp.epoch_lo; epoch < pp.epoch_hi; ++epoch) {
      std::vector<int> order = iota_order(data.train.size());
      Rng shuffle_rng(mix_seed(cfg.seed, stream::shuffle, (uint64_t)epoch));
      fisher_yates(order, shuffle_rng);

      double sum_cls = 0.0, sum_seg = 0.0, sum_total = 0.0;
      int64_t n_seen = 0;
      for (size_t lo = 0; lo < order.size(); lo += (size_t)cfg.batch_size) {
        size_t hi = std::min(order.size(), lo + (size_t)cfg.batch_size);
        Batch b = make_batch(data.train, order, lo, hi);

        Graph<float> g;
        auto bound = model.bind(g);
        Tensor<float> root;
        std::optional<double> lc, ls;
        if (pp.phase == Phase::seg) {
          Tensor<float> features = model.backbone_forward(g, bound, b.images, true);
          Tensor<float> seg = model.snet_forward(g, bound, features, b.images.shape[2], b.images.shape[3]);
          root = weighted_ce(g, seg, b.masks, weights);
          ls = root.item();
        } else if (pp.phase == Phase::cls) {
          Tensor<float> features = model.backbone_forward(g, bound, b.images, true);
          Tensor<float> cls = model.cnet_forward(g, bound, features);
          root = bce_with_logit(g, cls, b.labels);
          lc = root.item();
        } else {
          auto [seg, cls] = model.mtl_forward(g, bound, b.images, true);
          Tensor<float> l_cls = bce_with_logit(g, cls, b.labels);
          Tensor<float> l_seg = weighted_ce(g, seg, b.masks, weights);
          LossBundle<float> bundle = joint_loss(g, l_cls, l_seg, (float)cfg.lambda);
          root = bundle.total;
          lc = bundle.l_cls;
          ls = bundle.l_seg;
        }
        double total = root.item();
        if (!std::isfinite(total))
          throw divergence_error("loss diverged (non-finite) at step " +
                                 std::to_string(global_step + 1));
        g.backward(root);

        std::vector<const std::vector<float>*> grads;
        grads.reserve(param_ptrs.size());
        for (size_t i = 0; i < param_ptrs.size(); ++i) {
          const auto& gr = g.grad(bound.p[i].node);
          for (float v : gr)
            if (!std::isfinite(v))
              throw divergence_error("non-finite gradient for " + model.params()[i].name +
                                     " at step " + std::to_string(global_step + 1));
          grads.push_back(&gr);
        }
        sgd_step(param_ptrs, grads, velocity, cfg.lr, cfg.momentum, cfg.weight_decay);
        ++global_step;
        if (hook) hook(global_step, model);

        if (lc) sum_cls += *lc * b.n;
        if (ls) sum_seg += *ls * b.n;
        sum_total += total * b.n;
        n_seen += b.n;
      }
      log.row(epoch, global_step,
              pp.phase != Phase::seg ? std::optional<double>(sum_cls / n_seen) : std::nullopt,
              pp.phase != Phase::cls ? std::optional<double>(sum_seg / n_seen) : std::nullopt,
              sum_total / n_seen);
    }
    if (cfg.strategy == Strategy::sequential && pp.phase == Phase::seg) {
      save_checkpoint(model, out_dir / "checkpoint_phase1.bin");
      phase1_eval = evaluate(model, data.test, weights, /*dice=*/true, /*auc=*/false);
    }
  }

  bool want_dice = cfg.strategy == Strategy::seg_baseline || cfg.strategy == Strategy::joint;
  bool want_auc = cfg.strategy != Strategy::seg_baseline;
  EvalReport rep = evaluate(model, data.test, weights, want_dice, want_auc);
  if (cfg.strategy == Strategy::sequential && phase1_eval) {
    // Dice is reported from the frozen phase-1 head, not re-measured after
    // classification fine-tuning.
    rep.mean_dice = phase1_eval->mean_dice;
    rep.per_class_dice = phase1_eval->per_class_dice;
    rep.dice_present = phase1_eval->dice_present;
    rep.l_seg = phase1_eval->l_seg;
  }
  rep.strategy = to_string(cfg.strategy);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  RunResult result;
  result.report = rep;
  result.checkpoint = out_dir / "checkpoint.bin";
  save_checkpoint(model, result.checkpoint);
  std::ofstream rc(out_dir / "report.csv", std::ios::binary);
  if (!rc) throw io_error("cannot write " + (out_dir / "report.csv").string());
  rc << rep.csv_header() << "\n" << rep.csv_row() << "\n";
  return result;
}

}  // namespace mtl
