#include <gtest/gtest.h>

#include <cmath>

#include "revtrain/conv.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/model.hpp"
#include "revtrain/ops.hpp"

using namespace revtrain;

namespace {

const char* kHybridSpec = R"(
[model]
input_channels = 3
height = 8
width = 8
num_classes = 4
[layer]
kind = conv
c_out = 4
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

const char* kLayerWiseSpec = R"(
[model]
input_channels = 3
height = 8
width = 8
num_classes = 3
[layer]
kind = conv
c_out = 4
[layer]
kind = invconv
[layer]
kind = bn
[layer]
kind = lrelu
[layer]
kind = pool_b
[layer]
kind = invconv
[layer]
kind = bn
[layer]
kind = head
)";

template <typename T>
struct Run {
  BasicTensor<T> logits;
  std::vector<BasicTensor<T>> grads;
  SnrTrace trace;
};

template <typename T>
Run<T> train_step(SequentialModel<T>& model, const BasicTensor<T>& x, const std::vector<int>& labels,
                  BackpropMode mode, bool trace = false) {
  model.zero_grad();
  SavedState<T> saved;
  Run<T> r;
  r.logits = model_forward(model, x, mode, saved, trace);
  BasicTensor<T> g;
  softmax_cross_entropy<T>(r.logits, labels, &g);
  r.trace = model_backward(model, saved, g, mode);
  for (Param<T>* p : model.params()) r.grads.push_back(p->grad);
  return r;
}

double worst_rel(const std::vector<TensorD>& a, const std::vector<TensorD>& b) {
  return compare_gradients(a, b).worst;
}

}  // namespace

TEST(Model, LogitsIdenticalAcrossModes) {
  SequentialModel<float> model(parse_arch(kHybridSpec), 3);
  Tensor x = gaussian<float>(Shape{2, 3, 8, 8}, 0, 1, 4);
  const std::vector<int> labels{1, 3};
  const auto ref = train_step(model, x, labels, BackpropMode::stored);
  for (BackpropMode m : {BackpropMode::block_reversible, BackpropMode::hybrid}) {
    const auto r = train_step(model, x, labels, m);
    EXPECT_EQ(sum_sq_diff(r.logits, ref.logits), 0.0) << mode_name(m);
  }
}

TEST(Model, ReversibleGradientsMatchStoredInDouble) {
  SequentialModel<double> model(parse_arch(kHybridSpec), 5);
  TensorD x = gaussian<double>(Shape{2, 3, 8, 8}, 0, 1, 6);
  const std::vector<int> labels{0, 2};
  const auto ref = train_step(model, x, labels, BackpropMode::stored);
  const auto rev = train_step(model, x, labels, BackpropMode::block_reversible);
  const auto hyb = train_step(model, x, labels, BackpropMode::hybrid);
  EXPECT_LT(worst_rel(rev.grads, ref.grads), 1e-8);
  EXPECT_LT(worst_rel(hyb.grads, ref.grads), 1e-6);
}

TEST(Model, ReversibleGradientsMatchStoredInFloat) {
  SequentialModel<float> model(parse_arch(kHybridSpec), 5);
  Tensor x = gaussian<float>(Shape{2, 3, 8, 8}, 0, 1, 6);
  const std::vector<int> labels{0, 2};
  const auto ref = train_step(model, x, labels, BackpropMode::stored).grads;
  EXPECT_LT(compare_gradients(train_step(model, x, labels, BackpropMode::block_reversible).grads, ref).worst, 1e-5);
  EXPECT_LT(compare_gradients(train_step(model, x, labels, BackpropMode::hybrid).grads, ref).worst, 1e-3);
}

TEST(Model, StoredGradientsMatchFiniteDifferences) {
  SequentialModel<double> model(parse_arch(kHybridSpec), 7);
  TensorD x = gaussian<double>(Shape{2, 3, 8, 8}, 0, 1, 8);
  const std::vector<int> labels{1, 2};
  const auto ref = train_step(model, x, labels, BackpropMode::stored);
  auto loss = [&] {
    SavedState<double> s;
    return softmax_cross_entropy<double>(model_forward(model, x, BackpropMode::stored, s), labels, nullptr).loss;
  };
  auto ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& v = ps[i]->value;
    const std::int64_t n = std::min<std::int64_t>(v.numel(), 6);
    for (std::int64_t k = 0; k < n; ++k) {
      const double keep = v.data()[k];
      const double h = 1e-6;
      v.data()[k] = keep + h;
      const double fp = loss();
      v.data()[k] = keep - h;
      const double fm = loss();
      v.data()[k] = keep;
      const double num = (fp - fm) / (2 * h);
      const double ana = ref.grads[i].data()[k];
      EXPECT_NEAR(ana, num, 1e-5 * std::max(1.0, std::abs(num))) << ps[i]->name << "[" << k << "]";
    }
  }
}

TEST(Model, LayerWiseGradientsMatchStored) {
  SequentialModel<double> model(parse_arch(kLayerWiseSpec), 9);
  TensorD x = gaussian<double>(Shape{2, 3, 8, 8}, 0, 1, 10);
  const std::vector<int> labels{0, 1};
  const auto ref = train_step(model, x, labels, BackpropMode::stored);
  const auto lw = train_step(model, x, labels, BackpropMode::layer_wise, true);
  EXPECT_EQ(sum_sq_diff(lw.logits, ref.logits), 0.0);
  EXPECT_LT(worst_rel(lw.grads, ref.grads), 1e-8);
  EXPECT_FALSE(lw.trace.entries.empty());
  for (const auto& e : lw.trace.entries) EXPECT_GT(e.snr, 1e12) << e.name;
}

TEST(Model, HybridTraceCoversBlockInputsAndModuleLayers) {
  SequentialModel<float> model(parse_arch(kHybridSpec), 11);
  Tensor x = gaussian<float>(Shape{2, 3, 8, 8}, 0, 1, 12);
  const auto r = train_step(model, x, {0, 1}, BackpropMode::hybrid, true);
  int block_inputs = 0;
  int inner = 0;
  for (const auto& e : r.trace.entries) {
    if (e.block_input) ++block_inputs;
    if (e.module == 'F' || e.module == 'G') ++inner;
  }
  EXPECT_EQ(block_inputs, 2);
  EXPECT_EQ(inner, 12);
}

TEST(Model, ModeArchitectureMismatchIsConfigError) {
  SequentialModel<float> model(parse_arch(kHybridSpec), 1);
  SavedState<float> s;
  EXPECT_THROW(model_forward(model, Tensor(Shape{1, 3, 8, 8}), BackpropMode::layer_wise, s), ConfigError);
  SequentialModel<float> lw(parse_arch(kLayerWiseSpec), 1);
  EXPECT_THROW(model_forward(lw, Tensor(Shape{1, 3, 8, 8}), BackpropMode::hybrid, s), ConfigError);
}

TEST(Model, BackwardStateChecks) {
  SequentialModel<float> model(parse_arch(kHybridSpec), 1);
  SavedState<float> s;
  Tensor g(Shape{1, 4, 1, 1});
  EXPECT_THROW(model_backward(model, s, g, BackpropMode::stored), StateError);
  model_forward(model, gaussian<float>(Shape{1, 3, 8, 8}, 0, 1, 1), BackpropMode::stored, s);
  EXPECT_THROW(model_backward(model, s, g, BackpropMode::hybrid), StateError);
  model_forward(model, gaussian<float>(Shape{1, 3, 8, 8}, 0, 1, 1), BackpropMode::hybrid, s);
  model_backward(model, s, g, BackpropMode::hybrid);
  EXPECT_THROW(model_backward(model, s, g, BackpropMode::hybrid), StateError);
}

TEST(Model, HeadOnlyModelKeepsOnlyHeadInput) {
  SequentialModel<float> model(parse_arch("[model]\nnum_classes=2\n[layer]\nkind=head\n"), 1);
  SavedState<float> s;
  model_forward(model, gaussian<float>(Shape{2, 3, 4, 4}, 0, 1, 1), BackpropMode::stored, s);
  EXPECT_TRUE(s.stash.empty());
  EXPECT_EQ(s.bytes(), 2 * 3 * 4 * 4 * 4);
}

TEST(Model, StoredStateHoldsEveryLayerInput) {
  SequentialModel<float> model(parse_arch(kLayerWiseSpec), 1);
  SavedState<float> s;
  model_forward(model, gaussian<float>(Shape{2, 3, 8, 8}, 0, 1, 1), BackpropMode::stored, s);
  // conv(3ch) + invconv(2+2) + bn(4) + lrelu(4) at 8x8; invconv(2+2) + bn(4) at 4x4 x4 batch;
  // head input 4ch at 4x4 x4 batch.
  const std::int64_t px = 2 * 64;
  const std::int64_t expected = (3 + 4 + 4 + 4) * px + (4 + 4) * px + 4 * px;
  EXPECT_EQ(s.bytes(), expected * 4);
  EXPECT_EQ(s.stash.size(), 8u);  // coupling layers keep two halves
}

// ---- block inverse ---------------------------------------------------------------------

namespace {

Block<float> make_block(std::int64_t channels, int depth, std::uint64_t seed) {
  ArchSpec spec = parse_arch(
      "[model]\ninput_channels=" + std::to_string(channels) +
      "\nheight=8\nwidth=8\n[block]\nkind=reversible\nmodule=" + [&] {
        std::string m;
        for (int i = 0; i < depth; ++i) m += (i ? "," : "") + std::string("invconv:3,bn,lrelu");
        return m;
      }() + "\n[layer]\nkind=head\n");
  SequentialModel<float> model(spec, seed);
  return std::get<Block<float>>(model.segments()[0]);
}

}  // namespace

TEST(BlockInverse, ZeroWeightsGiveIdentity) {
  SequentialModel<float> model(
      parse_arch("[model]\ninput_channels=8\n[block]\nkind=reversible\nmodule=conv:3\n[layer]\nkind=head\n"), 1);
  Block<float> b = std::get<Block<float>>(model.segments()[0]);
  for (auto* m : {&b.f, &b.g}) {
    for (auto* p : std::get<Conv<float>>(m->layers[0]).params()) fill<float>(p->value.view(), 0.0f);
  }
  Tensor x = gaussian<float>(Shape{2, 8, 8, 8}, 0, 1, 2);
  Tensor y = x;
  block_forward_(b, y, Phase::train);
  EXPECT_EQ(sum_sq_diff(y, x), 0.0);
  EXPECT_EQ(sum_sq_diff(block_inverse(b, y), x), 0.0);
}

TEST(BlockInverse, RoundTripShallowModules) {
  for (int depth : {1, 2}) {
    Block<float> b = make_block(8, depth, 3);
    Tensor x = gaussian<float>(Shape{4, 8, 8, 8}, 0, 1, 4);
    Tensor y = x;
    block_forward_(b, y, Phase::train);
    EXPECT_LT(relative_l2_error(block_inverse(b, y), x), 1e-6) << depth;
  }
}

TEST(BlockInverse, TwentyChainedBlocks) {
  std::vector<Block<float>> blocks;
  for (int i = 0; i < 20; ++i) blocks.push_back(make_block(8, 1, 100 + i));
  Tensor x = gaussian<float>(Shape{4, 8, 8, 8}, 0, 1, 5);
  Tensor y = x;
  for (auto& b : blocks) block_forward_(b, y, Phase::train);
  for (std::size_t i = blocks.size(); i-- > 0;) block_inverse_(blocks[i], y);
  EXPECT_LT(relative_l2_error(y, x), 1e-4);
}

TEST(ConvCounts, ReversibleModesAddForwardPasses) {
  SequentialModel<float> model(parse_arch(R"(
[model]
height = 8
width = 8
num_classes = 2
[layer]
kind = pool_c
[block]
kind = reversible
module = invconv:3, bn, lrelu
repeat = 2
[layer]
kind = head
)"), 1);
  Tensor x = gaussian<float>(Shape{2, 3, 8, 8}, 0, 1, 1);
  std::map<BackpropMode, ConvCounts> fwd, bwd;
  for (BackpropMode m : {BackpropMode::stored, BackpropMode::block_reversible, BackpropMode::hybrid}) {
    SavedState<float> s;
    ConvCounter::reset();
    Tensor logits = model_forward(model, x, m, s);
    fwd[m] = ConvCounter::snapshot();
    ConvCounter::reset();
    model_backward(model, s, Tensor(logits.shape(), 0.1f), m);
    bwd[m] = ConvCounter::snapshot();
  }
  const std::int64_t f = fwd[BackpropMode::stored].forward;
  EXPECT_EQ(f, 8);
  EXPECT_EQ(bwd[BackpropMode::stored].forward, 0);
  EXPECT_EQ(bwd[BackpropMode::block_reversible].forward, f);
  EXPECT_EQ(bwd[BackpropMode::hybrid].forward, 2 * f);
  for (auto& [m, c] : bwd) EXPECT_EQ(c.backward_total(), 2 * f) << mode_name(m);
}
