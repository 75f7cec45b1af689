// mtlseg: phantom dataset synthesis, multi-task training, evaluation,
// run reporting, and the numeric verification suites.
//
// Exit codes: 0 ok, 1 verification failure, 2 usage/config, 3 IO,
//             4 numerical divergence.

#include <CLI11.hpp>
#include <chrono>
#include <iomanip>
#include <iostream>

#include "mtl/manifest.hpp"
#include "mtl/trainer.hpp"
#include "mtl/verify.hpp"

namespace fs = std::filesystem;
using namespace mtl;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string now_iso8601() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void stamp(KvFile& kv, const std::string& command) {
  kv.comment("mtlseg run manifest");
  kv.comment("command=" + command);
  kv.comment("tool_version=" + std::string(kToolVersion));
  kv.comment("started=" + now_iso8601());
}

std::string pct(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

void print_report(const EvalReport& r) {
  std::cout << "strategy:     " << r.strategy << "\n";
  std::cout << "mean dice:    " << (r.mean_dice ? pct(r.mean_dice) : "-");
  if (r.mean_dice) {
    std::cout << "  (per class:";
    for (int k = 0; k < kSegClasses; ++k) {
      std::cout << " c" << k << "=";
      std::cout << (k < (int)r.dice_present.size() && r.dice_present[k]
                        ? pct(r.per_class_dice[k])
                        : std::string("-"));
    }
    std::cout << ")";
  }
  std::cout << "\n";
  std::cout << "auc:          " << (r.auc ? pct(r.auc) : "-")
            << (r.auc_warning ? "  (warning: single-class test split, AUC undefined)" : "") << "\n";
  if (r.l_cls) std::cout << "test l_cls:   " << *r.l_cls << "\n";
  if (r.l_seg) std::cout << "test l_seg:   " << *r.l_seg << "\n";
  std::cout << "wall seconds: " << r.wall_seconds << "\n";
}

struct SynthArgs {
  std::string out;
  uint64_t seed = 0;
  int n_train = 512, n_test = 128;
  int height = 64, width = 64;
  double lesion_rate = 1.2;
  double noise_sigma = 0.03;
};

int cmd_synth(const SynthArgs& a) {
  PhantomConfig cfg;
  cfg.seed = a.seed;
  cfg.image_h = a.height;
  cfg.image_w = a.width;
  cfg.lesion_rate = a.lesion_rate;
  cfg.noise_sigma = a.noise_sigma;
  DatasetSummary sm = write_dataset(cfg, a.n_train, a.n_test, a.out);

  KvFile kv;
  stamp(kv, "synth");
  kv.set("out", a.out);
  kv.set("seed", std::to_string(a.seed));
  kv.set("n-train", std::to_string(a.n_train));
  kv.set("n-test", std::to_string(a.n_test));
  kv.set("height", std::to_string(a.height));
  kv.set("width", std::to_string(a.width));
  kv.set("lesion-rate", std::to_string(a.lesion_rate));
  kv.set("noise-sigma", std::to_string(a.noise_sigma));
  kv.write(fs::path(a.out) / "manifest.txt");

  std::cout << "wrote " << a.n_train << " train + " << a.n_test << " test samples to " << a.out
            << "\n";
  std::cout << "cancer prevalence: " << std::fixed << std::setprecision(4) << sm.prevalence << "\n";
  std::cout << "pixel fractions:";
  for (int k = 0; k < kSegClasses; ++k)
    std::cout << " c" << k << "=" << std::setprecision(4) << sm.pixel_fraction[k];
  std::cout << "\n";
  std::cout << "healthy-pixel fraction: " << sm.pixel_fraction[0] << "\n";
  return 0;
}

struct TrainArgs {
  std::string strategy;
  std::string data, out;
  double lambda = 0.5, lr = 0.05, momentum = 0.9, weight_decay = 1e-4;
  int epochs = 30, batch_size = 16, phase1_epochs = 20, threads = 1;
  uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a) {
  set_threads(a.threads);
  TrainConfig cfg;
  cfg.strategy = strategy_from_string(a.strategy);
  cfg.lambda = a.lambda;
  cfg.lr = a.lr;
  cfg.momentum = a.momentum;
  cfg.weight_decay = a.weight_decay;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.seed = a.seed;
  cfg.sequential_phase1_epochs = a.phase1_epochs;
  cfg.validate();

  Dataset data = load_dataset(a.data);
  RunResult res = run_strategy(cfg, data, a.out);

  KvFile kv;
  stamp(kv, "train");
  kv.set("strategy", a.strategy);
  kv.set("data", a.data);
  kv.set("out", a.out);
  kv.set("lambda", std::to_string(a.lambda));
  kv.set("lr", std::to_string(a.lr));
  kv.set("momentum", std::to_string(a.momentum));
  kv.set("weight-decay", std::to_string(a.weight_decay));
  kv.set("epochs", std::to_string(a.epochs));
  kv.set("batch-size", std::to_string(a.batch_size));
  kv.set("seed", std::to_string(a.seed));
  kv.set("phase1-epochs", std::to_string(a.phase1_epochs));
  kv.set("threads", std::to_string(a.threads));
  kv.write(fs::path(a.out) / "manifest.txt");

  print_report(res.report);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out, strategy;
};

int cmd_eval(const EvalArgs& a) {
  MtlModel<float> model = load_checkpoint(a.checkpoint);
  Dataset data = load_dataset(a.data);
  if (data.test.empty()) throw config_error("dataset has no test split to evaluate");
  std::vector<std::vector<uint8_t>> train_masks;
  for (const auto& s : data.train) train_masks.push_back(s.mask);
  ClassWeights<float> weights =
      train_masks.empty() ? ClassWeights<float>::uniform(model.k_classes())
                          : compute_class_weights<float>(train_masks, model.k_classes());

  bool want_dice = true, want_auc = true;
  if (!a.strategy.empty()) {
    Strategy s = strategy_from_string(a.strategy);
    want_dice = s != Strategy::cls_baseline;
    want_auc = s != Strategy::seg_baseline;
  }
  EvalReport rep = evaluate(model, data.test, weights, want_dice, want_auc);
  rep.strategy = a.strategy.empty() ? "checkpoint" : a.strategy;
  print_report(rep);

  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream rc(fs::path(a.out) / "report.csv", std::ios::binary);
    if (!rc) throw io_error("cannot write report to " + a.out);
    rc << rep.csv_header() << "\n" << rep.csv_row() << "\n";
    KvFile kv;
    stamp(kv, "eval");
    kv.set("checkpoint", a.checkpoint);
    kv.set("data", a.data);
    kv.set("out", a.out);
    if (!a.strategy.empty()) kv.set("strategy", a.strategy);
    kv.write(fs::path(a.out) / "manifest.txt");
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out) {
  std::vector<EvalReport> reports;
  for (const auto& dir : run_dirs) reports.push_back(parse_report_csv(fs::path(dir) / "report.csv"));

  std::ostringstream table;
  table << std::left << std::setw(22) << "training strategy";
  for (const auto& r : reports) table << std::setw(14) << r.strategy;
  table << "\n" << std::setw(22) << "seg perf (mean Dice)";
  for (const auto& r : reports) table << std::setw(14) << pct(r.mean_dice);
  table << "\n" << std::setw(22) << "cls perf (AUC)";
  for (const auto& r : reports) table << std::setw(14) << pct(r.auc);
  table << "\n";

  // directional note (reported, not asserted: seed-dependent at desk scale)
  auto find = [&](const char* name) -> const EvalReport* {
    for (const auto& r : reports)
      if (r.strategy == name) return &r;
    return nullptr;
  };
  const EvalReport* joint = find("joint");
  const EvalReport* seq = find("sequential");
  const EvalReport* cls = find("cls_baseline");
  const EvalReport* seg = find("seg_baseline");
  if (joint && seq && cls && joint->auc && seq->auc && cls->auc) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "auc deltas: joint-sequential %+.2f, sequential-cls_baseline %+.2f",
                  (*joint->auc - *seq->auc) * 100.0, (*seq->auc - *cls->auc) * 100.0);
    table << buf << "\n";
  }
  if (joint && seg && joint->mean_dice && seg->mean_dice) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "dice delta: joint-seg_baseline %+.2f",
                  (*joint->mean_dice - *seg->mean_dice) * 100.0);
    table << buf << "\n";
  }

  std::cout << table.str();
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw io_error("cannot write " + out);
    f << table.str();
  }
  return 0;
}

int cmd_verify(const std::string& suite) {
  std::vector<verify::Check> checks;
  if (suite == "gradcheck")
    checks = verify::run_gradcheck();
  else if (suite == "oracles")
    checks = verify::run_oracles();
  else if (suite == "all")
    checks = verify::run_all();
  else
    throw config_error("unknown suite '" + suite + "' (expected gradcheck|oracles|all)");
  for (const auto& c : checks)
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " — " << c.detail << "\n";
  return verify::all_pass(checks) ? 0 : 1;
}

}  // namespace

namespace {

// Expands "--config FILE" into the equivalent flags, placed before the
// user's explicit arguments so that explicit flags override file values.
// Returns the final argument list in CLI11's expected (reversed) order.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string cfg_path;
  std::vector<std::string> rest;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      cfg_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      cfg_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> ordered;
  if (!cfg_path.empty() && !rest.empty()) {
    ordered.push_back(rest[0]);  // subcommand
    const KvFile kv = KvFile::parse(cfg_path);
    for (const auto& [key, value] : kv.entries()) {
      ordered.push_back("--" + key);
      ordered.push_back(value);
    }
    ordered.insert(ordered.end(), rest.begin() + 1, rest.end());
  } else {
    ordered = rest;
  }
  std::reverse(ordered.begin(), ordered.end());
  return ordered;
}

void prefer_last_value(CLI::App* sub) {
  for (CLI::Option* opt : sub->get_options())
    if (opt->get_expected_min() >= 1) opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task lesion segmentation + cancer classification engine"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a phantom dataset");
  synth->add_option("--out", sa.out, "output dataset directory")->required();
  synth->add_option("--seed", sa.seed, "dataset RNG seed")->capture_default_str();
  synth->add_option("--n-train", sa.n_train, "training samples")->capture_default_str();
  synth->add_option("--n-test", sa.n_test, "test samples")->capture_default_str();
  synth->add_option("--height", sa.height, "image height")->capture_default_str();
  synth->add_option("--width", sa.width, "image width")->capture_default_str();
  synth->add_option("--lesion-rate", sa.lesion_rate, "mean lesions per image (Poisson)")
      ->capture_default_str();
  synth->add_option("--noise-sigma", sa.noise_sigma, "background noise scale")
      ->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train one strategy");
  train->add_option("--strategy", ta.strategy,
                    "cls_baseline | seg_baseline | sequential | joint")
      ->required();
  train->add_option("--data", ta.data, "dataset directory (from synth)")->required();
  train->add_option("--out", ta.out, "run output directory")->required();
  train->add_option("--lambda", ta.lambda, "joint loss weight on the classification term")
      ->capture_default_str();
  train->add_option("--lr", ta.lr, "learning rate")->capture_default_str();
  train->add_option("--momentum", ta.momentum, "SGD momentum")->capture_default_str();
  train->add_option("--weight-decay", ta.weight_decay, "L2 coupling")->capture_default_str();
  train->add_option("--epochs", ta.epochs, "training epochs")->capture_default_str();
  train->add_option("--batch-size", ta.batch_size, "minibatch size")->capture_default_str();
  train->add_option("--seed", ta.seed, "master seed (init/shuffle substreams)")
      ->capture_default_str();
  train->add_option("--phase1-epochs", ta.phase1_epochs,
                    "segmentation epochs before classification fine-tuning (sequential)")
      ->capture_default_str();
  train->add_option("--threads", ta.threads, "worker threads; 1 = bit-deterministic reference path")
      ->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "recompute metrics from a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--out", ea.out, "optional output directory for report.csv");
  eval->add_option("--strategy", ea.strategy, "mask metrics to a strategy's set");

  std::vector<std::string> run_dirs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "merge run reports into one table");
  report->add_option("--runs", run_dirs, "run directories (each containing report.csv)")
      ->expected(0, -1);
  report->add_option("--out", report_out, "optional file for the merged table");

  std::string suite = "all";
  auto* verify_cmd = app.add_subcommand("verify", "run the numeric verification suites");
  verify_cmd->add_option("--suite", suite, "gradcheck | oracles | all")->capture_default_str();

  // "--config FILE" on any subcommand loads a flat key=value file whose keys
  // mirror the flag names; explicit flags override file values. The option
  // itself is consumed by expand_config_args before parsing and is declared
  // here only so --help documents it.
  std::string config_sink;
  for (CLI::App* sub : {synth, train, eval, report, verify_cmd}) {
    sub->add_option("--config", config_sink, "flat key=value config file (flags override)");
    prefer_last_value(sub);
  }

  try {
    app.parse(expand_config_args(argc, argv));
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*report) return cmd_report(run_dirs, report_out);
    if (*verify_cmd) return cmd_verify(suite);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const tensor_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const divergence_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
