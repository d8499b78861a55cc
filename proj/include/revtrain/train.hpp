#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "revtrain/arch.hpp"
#include "revtrain/data.hpp"
#include "revtrain/model.hpp"

namespace revtrain {

// v = momentum * v + g + wd * theta;  theta -= lr * v.
// `velocity` is resized (zero-filled) on first use.
template <typename T>
void sgd_step(const std::vector<Param<T>*>& params, std::vector<BasicTensor<T>>& velocity, double lr,
              double momentum, double weight_decay);

// Piecewise-linear one-cycle policy over `total_steps` updates:
// lr rises lr_max/div -> lr_max over the first 45%, falls back over the next
// 45%, then anneals to lr_max/final_div. Momentum moves opposite to lr.
struct OneCycleSchedule {
  std::int64_t total_steps = 1;
  double lr_max = 0.05;
  double div = 10.0;
  double final_div = 1000.0;
  double momentum_high = 0.95;
  double momentum_low = 0.85;
  double warmup = 0.45;
  double cooldown = 0.45;

  double lr(std::int64_t step) const;
  double momentum(std::int64_t step) const;
};

struct TrainConfig {
  std::string arch;  // architecture file
  ArchSpec spec;     // parsed from `arch` unless set directly
  bool has_spec = false;
  std::optional<BackpropMode> mode;  // defaults to the spec's mode
  std::string data_dir;
  int epochs = 1;
  std::int64_t batch_size = 64;
  double lr_max = 0.05;
  double momentum_high = 0.95;
  double momentum_low = 0.85;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  bool augment = true;
  std::int64_t subset = 0;       // training records used (0: all)
  std::int64_t test_subset = 0;  // test records used (0: all)
  std::int64_t eval_batch = 200;
  bool timing = true;            // false writes 0 seconds for reproducible CSVs
  bool eval_initial = true;      // score the untrained model (TrainResult::initial_test_acc)
  int eval_every = 1;            // test every k-th epoch; the last epoch is always tested

  BackpropMode effective_mode() const { return mode.value_or(spec.mode); }
};

// key = value lines; '#' starts a comment. Relative arch / data paths resolve
// against the config file's directory. Throws ConfigError on unknown keys.
TrainConfig parse_train_config(const std::string& text, const std::string& origin = "<string>",
                               const std::string& base_dir = "");
TrainConfig load_train_config(const std::string& path);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;  // percent
  double test_acc = 0.0;   // percent; NaN when the epoch was not tested
  std::int64_t peak_bytes = 0;
  std::int64_t conv_applies = 0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double initial_test_acc = 0.0;
  std::unique_ptr<SequentialModel<float>> model;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Full loop: seeded shuffle, augmentation, forward in the chosen mode,
// cross-entropy, backward, SGD with the one-cycle schedule. Throws
// DivergenceError on a non-finite loss.
TrainResult train_run(const TrainConfig& cfg, const DatasetSource& data, const EpochCallback& on_epoch = {});

// Percent of correctly classified records, eval-phase statistics.
double evaluate(SequentialModel<float>& model, const Dataset& d, const Normalization& norm,
                std::int64_t batch, std::int64_t limit = 0);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);
std::string metrics_csv(const std::vector<EpochMetrics>& rows);

// Little-endian: "RVTC", u32 version, u32 count, then per tensor u32 name
// length, name, u8 dtype, 4 x i64 extents, raw values. Parameters then
// batch-norm running statistics.
template <typename T>
void save_checkpoint(const std::string& path, SequentialModel<T>& model);
// Throws FormatError on a bad header, truncation, or a name/shape mismatch.
template <typename T>
void load_checkpoint(const std::string& path, SequentialModel<T>& model);

}  // namespace revtrain
