#pragma once

// Optimizer, the four training strategies, checkpoints, and evaluation.

#include <filesystem>
#include <functional>
#include <optional>

#include "mtl/model.hpp"
#include "mtl/objectives.hpp"
#include "mtl/phantom.hpp"

namespace mtl {

struct config_error : std::runtime_error {
  explicit config_error(const std::string& m) : std::runtime_error(m) {}
};
struct divergence_error : std::runtime_error {
  explicit divergence_error(const std::string& m) : std::runtime_error(m) {}
};

enum class Strategy { cls_baseline, seg_baseline, sequential, joint };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);  // config_error on unknown

struct TrainConfig {
  Strategy strategy = Strategy::joint;
  double lambda = 0.5;  // joint only
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 30;
  int batch_size = 16;
  uint64_t seed = 0;
  int sequential_phase1_epochs = 20;
  BackboneConfig backbone;
  int k_classes = kSegClasses;

  void validate() const;  // throws config_error
};

struct EvalReport {
  std::string strategy;
  std::optional<double> mean_dice;       // present iff the strategy trains the seg head
  std::vector<double> per_class_dice;    // NaN where absent from both masks
  std::vector<bool> dice_present;
  std::optional<double> auc;             // present iff the strategy trains the cls head
  bool auc_warning = false;              // single-class test split
  std::optional<double> l_cls, l_seg;    // final test-split losses
  double wall_seconds = 0.0;

  std::string csv_header() const;
  std::string csv_row() const;
};

EvalReport parse_report_csv(const std::filesystem::path& path);  // io_error on failure

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
// Throws divergence_error on any non-finite gradient.
void sgd_step(std::vector<Tensor<float>*>& params, const std::vector<const std::vector<float>*>& grads,
              std::vector<std::vector<float>>& velocity, double lr, double momentum,
              double weight_decay);

// Binary checkpoint: "MTLC", u32 version, u32 tensor count, then per tensor
// u32 name length + name, u32 rank, u32 dims, little-endian f32 payload.
// A reserved "__meta__" tensor carries the architecture so a checkpoint is
// self-describing; running stats are included.
void save_checkpoint(const MtlModel<float>& model, const std::filesystem::path& path);
MtlModel<float> load_checkpoint(const std::filesystem::path& path);
int64_t checkpoint_byte_size(const MtlModel<float>& model);

// Evaluation on a sample set (eval-mode forward, argmax masks, sigmoid
// scores). mean Dice aggregates counts over the whole split.
EvalReport evaluate(const MtlModel<float>& model, const std::vector<Sample>& samples,
                    const ClassWeights<float>& weights, bool want_dice, bool want_auc);

using StepHook = std::function<void(int step, const MtlModel<float>& model)>;

struct RunResult {
  EvalReport report;
  std::filesystem::path checkpoint;
};

// Trains per the configured strategy, writes per-epoch CSV logs
// (train_log.csv, or train_log_phase1/2.csv for sequential), the final
// checkpoint, and report.csv under out_dir. The sequential strategy also
// writes checkpoint_phase1.bin and freezes its reported Dice at the end of
// phase 1.
RunResult run_strategy(const TrainConfig& cfg, const Dataset& data,
                       const std::filesystem::path& out_dir, const StepHook& hook = nullptr);

}  // namespace mtl
