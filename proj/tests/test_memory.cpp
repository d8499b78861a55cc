#include <gtest/gtest.h>

#include <cmath>

#include "revtrain/allocator.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/memory.hpp"
#include "revtrain/model.hpp"
#include "revtrain/ops.hpp"

using namespace revtrain;

namespace {

const char* kRevSpec = R"(
[model]
input_channels = 3
height = 16
width = 16
num_classes = 5
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
module = invconv:3, bn, lrelu, invconv:1, bn
[layer]
kind = pool_b
[block]
kind = reversible
module = invconv:3, bn
[layer]
kind = head
)";

const char* kRecomputeSpec = R"(
[model]
input_channels = 3
height = 8
width = 8
num_classes = 3
[layer]
kind = conv
c_out = 8
[layer]
kind = bn
[block]
kind = reversible
module = conv:3, bn, lrelu, conv:1
[layer]
kind = maxpool
[block]
kind = reversible
module = conv:1, lrelu:4, conv:3
[layer]
kind = head
)";

const char* kLayerWiseSpec = R"(
[model]
input_channels = 3
height = 8
width = 8
num_classes = 3
[layer]
kind = conv
c_out = 6
[layer]
kind = invconv
[layer]
kind = bn
[layer]
kind = lrelu
[layer]
kind = pool_c
[layer]
kind = invconv
[layer]
kind = bn
[layer]
kind = head
)";

const char* kResidualSpec = R"(
[model]
input_channels = 3
height = 8
width = 8
num_classes = 3
[layer]
kind = conv
c_out = 8
[block]
kind = residual
module = conv:3, bn, lrelu, conv:3, bn
[layer]
kind = maxpool
[layer]
kind = conv
c_out = 16
[layer]
kind = head
)";

std::vector<int> labels_for(std::int64_t bs, int classes) {
  std::vector<int> y;
  for (std::int64_t i = 0; i < bs; ++i) y.push_back(static_cast<int>(i % classes));
  return y;
}

// Bytes the allocator sees for one step, net of what was live before the input existed.
std::int64_t measured_step_peak(SequentialModel<float>& model, BackpropMode mode, std::int64_t bs,
                                std::int64_t* saved_bytes = nullptr) {
  const auto& s = model.spec();
  const auto labels = labels_for(bs, s.num_classes);
  auto step = [&](std::int64_t* saved_out) {
    MemoryScope scope;
    {
      BasicTensor<float> x = gaussian<float>(Shape{bs, s.input_channels, s.height, s.width}, 0.0, 1.0, 5);
      SavedState<float> saved;
      BasicTensor<float> logits = model_forward(model, std::move(x), mode, saved);
      if (saved_out != nullptr) *saved_out = saved.bytes();
      BasicTensor<float> g;
      softmax_cross_entropy<float>(logits, labels, &g);
      logits.release();
      model_backward(model, saved, g, mode);
    }
    const auto st = scope.stats();
    return st.peak_bytes - (st.live_bytes);
  };
  step(nullptr);  // first step allocates the cached batch statistics
  return step(saved_bytes);
}

struct Case {
  const char* spec;
  BackpropMode mode;
};

}  // namespace

TEST(MemoryModel, TrivialConvPerPixel) {
  ArchSpec s = parse_arch(R"(
[model]
input_channels = 32
[layer]
kind = conv
c_out = 32
[layer]
kind = head
)", "inline");
  // Stored: the conv input plus its output (the head input), 32 floats each.
  const auto sched = simulate_schedule(s, BackpropMode::stored, 10, 10, 2);
  EXPECT_EQ(sched.saved_state_bytes, 2 * 32 * 100 * 2 * 4);
  // The input batch is a line item of its own.
  const MemoryReport r = memory_report(s, BackpropMode::stored, 10, 10, 2);
  EXPECT_DOUBLE_EQ(r.activation_bytes_per_pixel, 128.0);
  EXPECT_EQ(r.input_bytes, 32 * 100 * 2 * 4);
  EXPECT_EQ(parameter_count(s), 32 * 32 * 9 + 32 + 32 * 10 + 10);
}

TEST(MemoryModel, GradientPairAtWideningConv) {
  ArchSpec s = parse_arch(R"(
[model]
input_channels = 32
[layer]
kind = conv
c_out = 64
[layer]
kind = head
)", "inline");
  const MemoryReport r = memory_report(s, BackpropMode::stored, 8, 8, 1);
  // Peak: head input (64) + its gradient (64), floats per pixel.
  EXPECT_DOUBLE_EQ(r.activation_bytes_per_pixel, 64.0 * 4);
  EXPECT_DOUBLE_EQ(r.gradient_bytes_per_pixel, 64.0 * 4);
}

TEST(MemoryModel, WideConvParameterCount) {
  ArchSpec s = parse_arch(R"(
[model]
input_channels = 2048
num_classes = 2
[layer]
kind = conv
c_out = 2048
[layer]
kind = head
)", "inline");
  EXPECT_EQ(parameter_count(s), 2048LL * 2048 * 9 + 2048 + 2048 * 2 + 2);
  EXPECT_EQ(weight_bytes(s), parameter_count(s) * 4);
}

TEST(MemoryModel, ParameterCountMatchesModel) {
  for (const char* text : {kRevSpec, kRecomputeSpec, kLayerWiseSpec, kResidualSpec}) {
    const ArchSpec s = parse_arch(text, "inline");
    SequentialModel<float> m(s, 1);
    EXPECT_EQ(parameter_count(s), m.parameter_count());
  }
}

TEST(MemoryModel, StatsBytesMatchModel) {
  const ArchSpec s = parse_arch(kRevSpec, "inline");
  SequentialModel<float> m(s, 1);
  measured_step_peak(m, BackpropMode::hybrid, 2);
  EXPECT_EQ(stats_bytes(s), m.stats_bytes());
}

TEST(MemoryModel, SimulatorMatchesAllocatorPeak) {
  const Case cases[] = {
      {kRevSpec, BackpropMode::stored},          {kRevSpec, BackpropMode::block_reversible},
      {kRevSpec, BackpropMode::hybrid},          {kRecomputeSpec, BackpropMode::stored},
      {kRecomputeSpec, BackpropMode::block_reversible}, {kLayerWiseSpec, BackpropMode::stored},
      {kLayerWiseSpec, BackpropMode::layer_wise}, {kResidualSpec, BackpropMode::stored},
  };
  for (const auto& c : cases) {
    const ArchSpec s = parse_arch(c.spec, "inline");
    SequentialModel<float> m(s, 3);
    const std::int64_t bs = 4;
    const std::int64_t measured = measured_step_peak(m, c.mode, bs);
    const Schedule sched = simulate_schedule(s, c.mode, s.height, s.width, bs);
    const auto& q = sched.events.at(sched.peak_all_event);
    EXPECT_EQ(measured, q.activation + q.gradient + q.input) << mode_name(c.mode) << "\n" << c.spec;
  }
}

TEST(MemoryModel, StoredSavedStateMatchesPrediction) {
  for (const char* text : {kRevSpec, kRecomputeSpec, kLayerWiseSpec, kResidualSpec}) {
    const ArchSpec s = parse_arch(text, "inline");
    SequentialModel<float> m(s, 3);
    std::int64_t saved = 0;
    measured_step_peak(m, BackpropMode::stored, 3, &saved);
    EXPECT_EQ(saved, simulate_schedule(s, BackpropMode::stored, s.height, s.width, 3).saved_state_bytes);
  }
}

TEST(MemoryModel, TotalIsAffineInPixels) {
  const ArchSpec s = parse_arch(kRevSpec, "inline");
  for (auto mode : {BackpropMode::stored, BackpropMode::hybrid, BackpropMode::block_reversible}) {
    const MemoryReport a = memory_report(s, mode, 32, 32, 8);
    const MemoryReport b = memory_report(s, mode, 64, 64, 8);
    EXPECT_NEAR(a.gradient_bytes_per_pixel, b.gradient_bytes_per_pixel, 1e-9);
    const double bytes_a = a.total() - static_cast<double>(a.weight_bytes);
    const double bytes_b = b.total() - static_cast<double>(b.weight_bytes);
    // Only the amortized statistics keep the slope from being exact.
    const double stats = mode == BackpropMode::stored ? 0.0 : static_cast<double>(a.stats_bytes);
    EXPECT_NEAR((bytes_b - stats) / (bytes_a - stats), 4.0, 1e-9) << mode_name(mode);
  }
}

TEST(MemoryModel, PeakScheduleEqualsTotal) {
  const ArchSpec s = parse_arch(kRevSpec, "inline");
  for (auto mode : {BackpropMode::stored, BackpropMode::hybrid, BackpropMode::block_reversible}) {
    const MemoryReport r = memory_report(s, mode, 32, 32, 8);
    EXPECT_NEAR(static_cast<double>(r.peak_schedule_bytes), r.total(), 1e-6 * r.total());
    EXPECT_FALSE(r.peak_step.empty());
  }
}

TEST(MemoryModel, ModeOrdering) {
  const ArchSpec s = parse_arch(kRevSpec, "inline");
  const double stored = memory_report(s, BackpropMode::stored, 64, 64, 16).total();
  const double rev = memory_report(s, BackpropMode::block_reversible, 64, 64, 16).total();
  const double hyb = memory_report(s, BackpropMode::hybrid, 64, 64, 16).total();
  EXPECT_LT(hyb, rev);
  EXPECT_LT(rev, stored);
}

TEST(MemoryModel, CsvColumns) {
  const ArchSpec s = parse_arch(kRevSpec, "inline");
  const std::string csv = report_csv(memory_report(s, BackpropMode::hybrid, 32, 32, 4));
  EXPECT_EQ(csv.rfind("component,bytes,bytes_per_pixel\n", 0), 0U);
  for (const char* row : {"\nweights,", "\nactivations,", "\ngradients,", "\ntotal,", "\noptimizer_momentum,",
                          "\ninput_batch,", "\nbn_statistics,", "\nweight_grads,"}) {
    EXPECT_NE(csv.find(row), std::string::npos) << row;
  }
}

TEST(MemoryModel, RejectsModeMismatch) {
  const ArchSpec s = parse_arch(kResidualSpec, "inline");
  EXPECT_THROW(simulate_schedule(s, BackpropMode::hybrid, 8, 8, 1), ConfigError);
  EXPECT_THROW(memory_report(s, BackpropMode::stored, 8, 8, 0), ConfigError);
}

namespace {

ArchSpec zoo(const std::string& name) { return load_arch(std::string(REVTRAIN_ZOO_DIR) + "/" + name + ".arch"); }

MemoryReport golden_report(const ArchSpec& s, BackpropMode mode) {
  return memory_report(s, mode, s.golden.h, s.golden.w, s.golden.bs);
}

}  // namespace

TEST(Zoo, StoredResNetHitsGoldenExactly) {
  const ArchSpec s = zoo("resnet");
  const MemoryReport r = golden_report(s, BackpropMode::stored);
  EXPECT_DOUBLE_EQ(r.bytes_per_pixel(), 1928.0);
  EXPECT_NEAR(static_cast<double>(r.weight_bytes), 12.5e6, 0.02 * 12.5e6);
}

TEST(Zoo, LayerWiseAndRevNetWithinStatistics) {
  EXPECT_NEAR(golden_report(zoo("layerwise"), BackpropMode::layer_wise).bytes_per_pixel(), 320.0, 0.05);
  EXPECT_NEAR(golden_report(zoo("revnet"), BackpropMode::block_reversible).bytes_per_pixel(), 640.0, 0.05);
}

TEST(Zoo, ClosedFormAgreesWithSimulator) {
  const std::pair<const char*, BackpropMode> cases[] = {
      {"resnet", BackpropMode::stored},
      {"revnet", BackpropMode::stored},
      {"revnet", BackpropMode::block_reversible},
      {"layerwise", BackpropMode::stored},
      {"layerwise", BackpropMode::layer_wise},
      {"hybrid", BackpropMode::stored},
      {"hybrid", BackpropMode::block_reversible},
      {"hybrid", BackpropMode::hybrid},
  };
  for (const auto& [name, mode] : cases) {
    const ArchSpec s = zoo(name);
    const MemoryReport r = golden_report(s, mode);
    const double closed =
        static_cast<double>(r.weight_bytes) + closed_form_bytes_per_pixel(s, mode) * r.pixels();
    EXPECT_NEAR(static_cast<double>(r.peak_schedule_bytes), closed, 0.01 * closed) << name << " " << mode_name(mode);
  }
}

TEST(Zoo, ModeOrderingOnOneSpec) {
  const ArchSpec s = zoo("hybrid");
  const double hyb = golden_report(s, BackpropMode::hybrid).bytes_per_pixel();
  const double rev = golden_report(s, BackpropMode::block_reversible).bytes_per_pixel();
  const double st = golden_report(s, BackpropMode::stored).bytes_per_pixel();
  EXPECT_LT(hyb, rev);
  EXPECT_LT(rev, st);
}

TEST(Zoo, ModeOrderingAcrossSpecs) {
  const double lw = golden_report(zoo("layerwise"), BackpropMode::layer_wise).bytes_per_pixel();
  const double hyb = golden_report(zoo("hybrid"), BackpropMode::hybrid).bytes_per_pixel();
  const double rev = golden_report(zoo("revnet"), BackpropMode::block_reversible).bytes_per_pixel();
  const double st = golden_report(zoo("resnet"), BackpropMode::stored).bytes_per_pixel();
  EXPECT_LE(lw, hyb);
  EXPECT_LE(hyb, rev);
  EXPECT_LE(rev, st);
}
