#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "revtrain/errors.hpp"
#include "revtrain/ops.hpp"
#include "revtrain/train.hpp"

using namespace revtrain;
namespace fs = std::filesystem;

namespace {

const char* kSmallSpec = R"(
[model]
name = small
[layer]
kind = conv
c_out = 8
[block]
kind = reversible
module = invconv:3, bn, lrelu
[layer]
kind = pool_c
[block]
kind = reversible
module = invconv:3, bn, lrelu
[layer]
kind = head
)";

// No batch norm: running statistics cannot move under lr = 0.
const char* kPlainSpec = R"(
[model]
[layer]
kind = conv
c_out = 8
[layer]
kind = maxpool
[layer]
kind = lrelu
[layer]
kind = head
)";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("revtrain_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetSource small_source(std::int64_t train, std::int64_t test) {
  DatasetSource s;
  s.train = synthetic_cifar(train, 1);
  s.test = synthetic_cifar(test, 2);
  s.norm = Normalization::of(s.train);
  return s;
}

TrainConfig small_config(const char* spec) {
  TrainConfig c;
  c.spec = parse_arch(spec, "inline");
  c.has_spec = true;
  c.batch_size = 16;
  c.epochs = 1;
  c.lr_max = 0.05;
  c.timing = false;
  return c;
}

std::vector<std::uint8_t> pattern_image(int tag) {
  std::vector<std::uint8_t> img(static_cast<std::size_t>(kCifarPixels));
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>((i * 7 + tag * 13) % 251);
  return img;
}

}  // namespace

TEST(Cifar, ParsesRecordsWrittenByHand) {
  const fs::path dir = scratch_dir("parse");
  const fs::path f = dir / "b.bin";
  {
    std::ofstream out(f, std::ios::binary);
    for (int r = 0; r < 3; ++r) {
      out.put(static_cast<char>(r * 3));
      const auto img = pattern_image(r);
      out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
  }
  const Dataset d = read_cifar_batch(f.string(), 3);
  ASSERT_EQ(d.size(), 3);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(d.labels[static_cast<std::size_t>(r)], r * 3);
    const auto img = pattern_image(r);
    EXPECT_TRUE(std::equal(img.begin(), img.end(), d.image(r)));
  }
  // Red plane first: byte 1 of a record is pixel (0, 0) of channel 0.
  EXPECT_EQ(d.image(1)[0], pattern_image(1)[0]);
  EXPECT_EQ(d.image(1)[1024], pattern_image(1)[1024]);
}

TEST(Cifar, TruncatedFileNamesPathAndSizes) {
  const fs::path dir = scratch_dir("trunc");
  const fs::path f = dir / "data_batch_1.bin";
  {
    std::ofstream out(f, std::ios::binary);
    std::vector<char> bytes(static_cast<std::size_t>(2 * kCifarRecord - 5), 1);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  try {
    read_cifar_batch(f.string());
    FAIL() << "no exception";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("data_batch_1.bin"), std::string::npos) << msg;
    EXPECT_NE(msg.find("30730000"), std::string::npos) << msg;
    EXPECT_NE(msg.find("6141"), std::string::npos) << msg;
  }
  EXPECT_THROW(read_cifar_batch(f.string(), 0), FormatError);
  EXPECT_THROW(read_cifar_batch((dir / "missing.bin").string()), FormatError);
}

TEST(Cifar, RejectsOutOfRangeLabel) {
  const fs::path dir = scratch_dir("label");
  Dataset d = synthetic_cifar(2, 3);
  d.labels[1] = 10;
  write_cifar_batch((dir / "b.bin").string(), d);
  EXPECT_THROW(read_cifar_batch((dir / "b.bin").string(), 2), FormatError);
}

TEST(Cifar, LoadsSplitDirectory) {
  const fs::path dir = scratch_dir("split");
  write_synthetic_cifar(dir.string(), 20, 30, 4);
  const DatasetSource s = load_cifar10(dir.string());
  EXPECT_EQ(s.train.size(), 100);
  EXPECT_EQ(s.test.size(), 30);
  for (int c = 0; c < 3; ++c) {
    EXPECT_GT(s.norm.std[static_cast<std::size_t>(c)], 0.05);
    EXPECT_GT(s.norm.mean[static_cast<std::size_t>(c)], 0.2);
  }
  fs::remove(dir / "data_batch_3.bin");
  EXPECT_THROW(load_cifar10(dir.string()), FormatError);
}

TEST(Cifar, NormalizedBatchHasUnitStatistics) {
  const Dataset d = synthetic_cifar(64, 5);
  const Normalization n = Normalization::of(d);
  std::vector<std::int64_t> idx(64);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  const Batch b = make_batch(d, idx, n);
  const ChannelStats st = channel_mean_var(b.x);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(st.mean[static_cast<std::size_t>(c)], 0.0, 1e-4);
    EXPECT_NEAR(st.var[static_cast<std::size_t>(c)], 1.0, 1e-3);
  }
  EXPECT_EQ(b.labels[3], d.labels[3]);
}

TEST(Augment, FlipIsAnInvolution) {
  auto img = pattern_image(9);
  const auto orig = img;
  flip_horizontal(img.data());
  EXPECT_NE(img, orig);
  EXPECT_EQ(img[31], orig[0]);
  EXPECT_EQ(img[1024 + 32], orig[1024 + 63]);
  flip_horizontal(img.data());
  EXPECT_EQ(img, orig);
}

TEST(Augment, SeededAndDisableable) {
  std::vector<std::uint8_t> base;
  for (int i = 0; i < 8; ++i) {
    const auto img = pattern_image(i);
    base.insert(base.end(), img.begin(), img.end());
  }
  auto a = base;
  auto b = base;
  auto c = base;
  Pcg32 ra(3, 2);
  Pcg32 rb(3, 2);
  Pcg32 rc(4, 2);
  augment(a, 8, AugmentOptions{}, ra);
  augment(b, 8, AugmentOptions{}, rb);
  augment(c, 8, AugmentOptions{}, rc);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_NE(a, base);

  auto d = base;
  Pcg32 rd(3, 2);
  augment(d, 8, AugmentOptions{false, true, 4}, rd);
  EXPECT_EQ(d, base);
  auto e = base;
  augment(e, 8, AugmentOptions{true, false, 0}, rd);
  EXPECT_EQ(e, base);
}

TEST(Augment, CropIsAZeroFilledTranslation) {
  std::vector<std::uint8_t> img(static_cast<std::size_t>(kCifarPixels), 200);
  Pcg32 rng(17, 2);
  int shifted = 0;
  for (int t = 0; t < 20; ++t) {
    auto x = img;
    augment(x, 1, AugmentOptions{true, false, 4}, rng);
    int zeros = 0;
    for (auto v : x) zeros += v == 0;
    for (auto v : x) ASSERT_TRUE(v == 0 || v == 200);
    // A shift by (dy, dx) zeroes 3 * (32|dy| + 32|dx| - |dy||dx|) pixels.
    bool ok = false;
    for (int dy = 0; dy <= 4 && !ok; ++dy)
      for (int dx = 0; dx <= 4 && !ok; ++dx) ok = zeros == 3 * (32 * dy + 32 * dx - dy * dx);
    EXPECT_TRUE(ok) << zeros;
    shifted += zeros > 0;
  }
  EXPECT_GT(shifted, 10);
}

TEST(Sgd, TwoStepMomentumRecurrence) {
  Param<double> p("w", TensorD(checked_shape(1, 1, 1, 2), 0.0));
  p.value.data()[0] = 1.0;
  p.value.data()[1] = -2.0;
  std::vector<TensorD> vel;
  const double lr = 0.1;
  const double m = 0.9;
  const double wd = 0.01;
  const double g1[2] = {0.5, 0.25};
  const double g2[2] = {-1.0, 2.0};
  double theta[2] = {1.0, -2.0};
  double v[2] = {0.0, 0.0};
  for (const double* g : {g1, g2}) {
    p.grad.data()[0] = g[0];
    p.grad.data()[1] = g[1];
    sgd_step<double>({&p}, vel, lr, m, wd);
    for (int k = 0; k < 2; ++k) {
      v[k] = m * v[k] + g[k] + wd * theta[k];
      theta[k] -= lr * v[k];
    }
  }
  // Hand-expanded first coordinate.
  const double v1 = 0.5 + 0.01 * 1.0;
  const double t1 = 1.0 - 0.1 * v1;
  const double v2 = 0.9 * v1 - 1.0 + 0.01 * t1;
  EXPECT_DOUBLE_EQ(theta[0], t1 - 0.1 * v2);
  EXPECT_DOUBLE_EQ(p.value.data()[0], theta[0]);
  EXPECT_DOUBLE_EQ(p.value.data()[1], theta[1]);
  EXPECT_DOUBLE_EQ(vel[0].data()[0], v2);
}

TEST(Schedule, OneCycleShape) {
  OneCycleSchedule s;
  s.total_steps = 1001;
  s.lr_max = 0.4;
  EXPECT_NEAR(s.lr(0), 0.04, 1e-12);
  EXPECT_NEAR(s.lr(450), 0.4, 1e-12);
  EXPECT_NEAR(s.lr(900), 0.04, 1e-12);
  EXPECT_NEAR(s.lr(1000), 0.0004, 1e-12);
  EXPECT_NEAR(s.momentum(0), 0.95, 1e-12);
  EXPECT_NEAR(s.momentum(450), 0.85, 1e-12);
  EXPECT_NEAR(s.momentum(900), 0.95, 1e-12);
  EXPECT_NEAR(s.momentum(1000), 0.95, 1e-12);
  for (std::int64_t t = 1; t < 450; ++t) {
    EXPECT_GT(s.lr(t), s.lr(t - 1));
    EXPECT_LT(s.momentum(t), s.momentum(t - 1));
  }
  for (std::int64_t t = 451; t <= 1000; ++t) EXPECT_LT(s.lr(t), s.lr(t - 1));
}

TEST(Config, ParsesKeysAndRejectsUnknown) {
  const TrainConfig c = parse_train_config(
      "# comment\nepochs = 3\nbatch_size=32\nlr_max = 0.1 # inline\nmode = hybrid\naugment = false\n"
      "subset = 500\nseed = 7\ntiming = off\n");
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.batch_size, 32);
  EXPECT_DOUBLE_EQ(c.lr_max, 0.1);
  EXPECT_EQ(c.mode, BackpropMode::hybrid);
  EXPECT_FALSE(c.augment);
  EXPECT_EQ(c.subset, 500);
  EXPECT_EQ(c.seed, 7U);
  EXPECT_FALSE(c.timing);
  EXPECT_FALSE(c.has_spec);
  EXPECT_THROW(parse_train_config("speed = 3\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs = three\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs 3\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs = 0\n"), ConfigError);
  EXPECT_THROW(parse_train_config("mode = sideways\n"), ConfigError);
}

TEST(Config, ResolvesArchRelativeToFile) {
  const fs::path dir = scratch_dir("cfg");
  { std::ofstream(dir / "m.arch") << kSmallSpec; }
  { std::ofstream(dir / "run.cfg") << "arch = m.arch\ndata = data\n"; }
  const TrainConfig c = load_train_config((dir / "run.cfg").string());
  EXPECT_TRUE(c.has_spec);
  EXPECT_EQ(c.spec.name, "small");
  EXPECT_EQ(fs::path(c.data_dir), dir / "data");
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  const DatasetSource src = small_source(64, 64);
  TrainConfig cfg = small_config(kPlainSpec);
  cfg.lr_max = 0.0;
  SequentialModel<float> fresh(cfg.spec, cfg.seed);
  const TrainResult r = train_run(cfg, src);
  auto a = fresh.named_params();
  auto b = r.model->named_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second->value.values().begin(), a[i].second->value.values().end(),
                           b[i].second->value.values().begin()))
        << a[i].first;
  EXPECT_DOUBLE_EQ(r.history.at(0).test_acc, r.initial_test_acc);
}

TEST(Train, EvalEveryTestsOnlyChosenAndLastEpochs) {
  const DatasetSource src = small_source(32, 16);
  TrainConfig cfg = small_config(kPlainSpec);
  cfg.epochs = 3;
  cfg.eval_every = 2;
  const TrainResult r = train_run(cfg, src);
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_TRUE(std::isnan(r.history[0].test_acc));
  EXPECT_FALSE(std::isnan(r.history[1].test_acc));
  EXPECT_FALSE(std::isnan(r.history[2].test_acc));
  EXPECT_NE(metrics_csv_row(r.history[0]).find(",,"), std::string::npos);
  EXPECT_THROW(parse_train_config("eval_every = 0\n"), ConfigError);
}

TEST(Train, SameSeedGivesIdenticalMetrics) {
  const DatasetSource src = small_source(96, 64);
  for (BackpropMode mode : {BackpropMode::stored, BackpropMode::hybrid}) {
    TrainConfig cfg = small_config(kSmallSpec);
    cfg.mode = mode;
    cfg.epochs = 2;
    const std::string a = metrics_csv(train_run(cfg, src).history);
    const std::string b = metrics_csv(train_run(cfg, src).history);
    EXPECT_EQ(a, b);
    cfg.seed = 1;
    EXPECT_NE(a, metrics_csv(train_run(cfg, src).history));
  }
}

TEST(Train, LossFallsOnLearnableData) {
  const DatasetSource src = small_source(512, 200);
  TrainConfig cfg = small_config(kSmallSpec);
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.lr_max = 0.1;
  const TrainResult r = train_run(cfg, src);
  ASSERT_EQ(r.history.size(), 3U);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_GT(r.history.back().test_acc, 25.0);
  EXPECT_GT(r.history.back().peak_bytes, 0);
  EXPECT_GT(r.history.back().conv_applies, 0);
}

TEST(Train, ModesAgreeOnConvWorkPerEpoch) {
  const DatasetSource src = small_source(64, 16);
  std::vector<std::int64_t> applies;
  for (BackpropMode mode : {BackpropMode::stored, BackpropMode::block_reversible, BackpropMode::hybrid}) {
    TrainConfig cfg = small_config(kSmallSpec);
    cfg.mode = mode;
    applies.push_back(train_run(cfg, src).history.at(0).conv_applies);
  }
  EXPECT_LT(applies[0], applies[1]);
  EXPECT_LE(applies[1], applies[2]);
}

TEST(Train, DivergenceNamesStepAndRate) {
  const DatasetSource src = small_source(128, 16);
  TrainConfig cfg = small_config(kPlainSpec);
  cfg.lr_max = 1e30;
  try {
    train_run(cfg, src);
    FAIL() << "no exception";
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step"), std::string::npos);
    EXPECT_NE(msg.find("lr"), std::string::npos);
  }
}

TEST(Train, RejectsWrongInputGeometry) {
  TrainConfig cfg = small_config(kSmallSpec);
  cfg.spec.height = 16;
  cfg.spec.width = 16;
  EXPECT_THROW(train_run(cfg, small_source(16, 16)), ConfigError);
  TrainConfig none;
  EXPECT_THROW(train_run(none, small_source(16, 16)), ConfigError);
}

TEST(Checkpoint, RoundTripsParametersAndStatistics) {
  const fs::path dir = scratch_dir("ckpt");
  const DatasetSource src = small_source(64, 16);
  TrainConfig cfg = small_config(kSmallSpec);
  const TrainResult r = train_run(cfg, src);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, *r.model);
  SequentialModel<float> other(cfg.spec, 99);
  load_checkpoint(path, other);
  auto a = r.model->named_params();
  auto b = other.named_params();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second->value.values().begin(), a[i].second->value.values().end(),
                           b[i].second->value.values().begin()));
  auto ba = r.model->named_buffers();
  auto bb = other.named_buffers();
  ASSERT_FALSE(ba.empty());
  for (std::size_t i = 0; i < ba.size(); ++i)
    EXPECT_TRUE(std::equal(ba[i].second->values().begin(), ba[i].second->values().end(),
                           bb[i].second->values().begin()));
  EXPECT_DOUBLE_EQ(evaluate(other, src.test, src.norm, 8), evaluate(*r.model, src.test, src.norm, 8));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const fs::path dir = scratch_dir("ckpt_bad");
  SequentialModel<float> m(parse_arch(kSmallSpec, "inline"), 1);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, m);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 3);
  EXPECT_THROW(load_checkpoint(path, m), FormatError);
  { std::ofstream(path, std::ios::binary) << "NOPE"; }
  EXPECT_THROW(load_checkpoint(path, m), FormatError);
  save_checkpoint(path, m);
  SequentialModel<float> plain(parse_arch(kPlainSpec, "inline"), 1);
  EXPECT_THROW(load_checkpoint(path, plain), FormatError);
  SequentialModel<double> wide(parse_arch(kSmallSpec, "inline"), 1);
  EXPECT_THROW(load_checkpoint(path, wide), FormatError);
}
