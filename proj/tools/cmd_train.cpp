#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>

#include "commands.hpp"
#include "revtrain/data.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/train.hpp"

namespace revtrain::cli {

namespace fs = std::filesystem;

namespace {

struct TrainFlags {
  std::string config;
  std::string mode;
  std::string data;
  std::string out = "run";
  std::int64_t subset = -1;
  std::int64_t test_subset = -1;
  std::int64_t seed = -1;
  int epochs = 0;
  bool no_timing = false;
};

int run_train(const TrainFlags& f) {
  TrainConfig cfg = load_train_config(f.config);
  if (!cfg.has_spec) throw ConfigError(f.config + ": no 'arch' key");
  if (!f.mode.empty()) cfg.mode = parse_mode(f.mode);
  if (f.subset >= 0) cfg.subset = f.subset;
  if (f.test_subset >= 0) cfg.test_subset = f.test_subset;
  if (f.seed >= 0) cfg.seed = static_cast<std::uint64_t>(f.seed);
  if (f.epochs > 0) cfg.epochs = f.epochs;
  if (f.no_timing) cfg.timing = false;
  check_mode(cfg.spec, cfg.effective_mode());
  const std::string root = dataset_root(f.data.empty() ? cfg.data_dir : f.data);
  const DatasetSource data = load_cifar10(root);

  fs::create_directories(f.out);
  const fs::path csv_path = fs::path(f.out) / "metrics.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot write " + csv_path.string());
  csv << metrics_csv_header() << '\n';
  std::cout << "training " << cfg.spec.name << " in " << mode_name(cfg.effective_mode()) << " mode on "
            << data.train.head(cfg.subset).size() << " records, " << cfg.epochs << " epoch(s)\n";
  const TrainResult r = train_run(cfg, data, [&](const EpochMetrics& m) {
    csv << metrics_csv_row(m) << '\n' << std::flush;
    std::cout << "epoch " << m.epoch << "  loss " << std::fixed << std::setprecision(4) << m.train_loss
              << "  train " << std::setprecision(2) << m.train_acc << "%  test ";
    if (std::isnan(m.test_acc))
      std::cout << '-';
    else
      std::cout << m.test_acc << '%';
    std::cout << "  peak " << m.peak_bytes << " B\n";
  });
  save_checkpoint((fs::path(f.out) / "model.ckpt").string(), *r.model);
  const EpochMetrics& last = r.history.back();
  std::cout << "final test accuracy " << std::fixed << std::setprecision(2) << last.test_acc << "%\n"
            << "measured peak bytes " << last.peak_bytes << '\n'
            << "wrote " << csv_path.string() << " and " << (fs::path(f.out) / "model.ckpt").string() << '\n';
  return kOk;
}

struct DataFlags {
  std::string data;
  std::string synthesize;
  std::int64_t per_file = 1000;
  std::int64_t test = 1000;
  std::int64_t seed = 1;
};

void print_split(const char* name, const Dataset& d) {
  std::vector<std::int64_t> hist(kCifarClasses, 0);
  for (auto l : d.labels) ++hist[l];
  std::cout << name << ": " << d.size() << " records, labels";
  for (auto h : hist) std::cout << ' ' << h;
  std::cout << '\n';
}

int run_inspect(const DataFlags& f) {
  if (!f.synthesize.empty()) {
    if (f.per_file < 1 || f.test < 1) throw ConfigError("--per-file and --test must be >= 1");
    write_synthetic_cifar(f.synthesize, f.per_file, f.test, static_cast<std::uint64_t>(f.seed));
    std::cout << "wrote synthetic dataset to " << f.synthesize << " (" << 5 * f.per_file << " train, " << f.test
              << " test)\n";
    return kOk;
  }
  const std::string root = dataset_root(f.data);
  const DatasetSource s = load_cifar10(root);
  std::cout << "root " << root << '\n';
  print_split("train", s.train);
  print_split("test", s.test);
  std::cout << std::setprecision(5) << "mean " << s.norm.mean[0] << ' ' << s.norm.mean[1] << ' ' << s.norm.mean[2]
            << "\nstd  " << s.norm.std[0] << ' ' << s.norm.std[1] << ' ' << s.norm.std[2] << '\n';
  return kOk;
}

}  // namespace

void add_train(CLI::App& app, int& code) {
  auto f = std::make_shared<TrainFlags>();
  CLI::App* sub = app.add_subcommand("train", "Train a model and write metrics.csv and model.ckpt");
  sub->add_option("--config", f->config, "key=value training config")->required();
  sub->add_option("--mode", f->mode, "stored | block | layerwise | hybrid (default: config, then spec)");
  sub->add_option("--data", f->data, "dataset root (default: config 'data', then $REVTRAIN_DATA)");
  sub->add_option("--subset", f->subset, "training records to use (0: all)");
  sub->add_option("--test-subset", f->test_subset, "test records to evaluate (0: all)");
  sub->add_option("--seed", f->seed, "seed for init, shuffling and augmentation");
  sub->add_option("--epochs", f->epochs, "override the config epoch count");
  sub->add_option("--out", f->out, "output directory")->capture_default_str();
  sub->add_flag("--no-timing", f->no_timing, "write 0 in the seconds column (reproducible CSV)");
  sub->callback([f, &code] { code = run_train(*f); });
}

void add_inspect_data(CLI::App& app, int& code) {
  auto f = std::make_shared<DataFlags>();
  CLI::App* sub = app.add_subcommand("inspect-data", "Summarize a CIFAR-10 binary directory or write a synthetic one");
  sub->add_option("--data", f->data, "dataset root (default: $REVTRAIN_DATA)");
  sub->add_option("--synthesize", f->synthesize, "write a synthetic CIFAR-format dataset to this directory");
  sub->add_option("--per-file", f->per_file, "records per training file when synthesizing")->capture_default_str();
  sub->add_option("--test", f->test, "test records when synthesizing")->capture_default_str();
  sub->add_option("--seed", f->seed, "synthesis seed")->capture_default_str();
  sub->callback([f, &code] { code = run_inspect(*f); });
}

}  // namespace revtrain::cli
