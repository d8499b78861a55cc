#include <gtest/gtest.h>

#include <algorithm>

#include "revtrain/errors.hpp"
#include "revtrain/gradcheck.hpp"

using namespace revtrain;

namespace {

const char* kTwoBlock = R"(
[model]
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

std::string deep_layer_wise(int units, double n) {
  std::string s = "[model]\nheight = 8\nwidth = 8\nnum_classes = 4\n[layer]\nkind = conv\nc_out = 16\n";
  for (int i = 0; i < units; ++i)
    s += "[layer]\nkind = invconv\n[layer]\nkind = bn\n[layer]\nkind = lrelu\nn = " + std::to_string(n) + "\n";
  return s + "[layer]\nkind = head\n";
}

}  // namespace

TEST(Gradcheck, ReversibleModesAgreeWithStoredInDouble) {
  const ArchSpec spec = parse_arch(kTwoBlock);
  const auto rev = gradcheck<double>(spec, BackpropMode::block_reversible);
  const auto hyb = gradcheck<double>(spec, BackpropMode::hybrid);
  EXPECT_LT(rev.worst_vs_stored, 1e-8);
  EXPECT_LT(hyb.worst_vs_stored, 1e-6);
  EXPECT_LT(rev.worst_vs_numeric, 1e-5);
  EXPECT_EQ(rev.vs_stored.size(), rev.vs_numeric.size());
  EXPECT_EQ(rev.vs_stored.front().name.rfind("s0.", 0), 0U);
}

TEST(Gradcheck, StoredAgainstItselfIsExact) {
  const auto r = gradcheck<double>(parse_arch(kTwoBlock), BackpropMode::stored, {3, 2, 0, 1e-6});
  EXPECT_EQ(r.worst_vs_stored, 0.0);
  EXPECT_TRUE(r.vs_numeric.empty());
}

TEST(Gradcheck, DeepSteepLayerWiseFloatBreaksDown) {
  const ArchSpec spec = parse_arch(deep_layer_wise(10, 10.0));
  const auto r = gradcheck<float>(spec, BackpropMode::layer_wise, {1, 4, 0, 1e-6});
  EXPECT_GT(r.worst_vs_stored, 1e-2);
}

TEST(Gradcheck, RejectsModeThatDoesNotFit) {
  const ArchSpec spec = parse_arch("[model]\n[layer]\nkind = conv\nc_out = 4\n[layer]\nkind = maxpool\n"
                                   "[layer]\nkind = conv\n[layer]\nkind = head\n");
  EXPECT_THROW(gradcheck<double>(spec, BackpropMode::hybrid), ConfigError);
  EXPECT_THROW(gradcheck<double>(parse_arch(kTwoBlock), BackpropMode::stored, {1, 1, 0, 1e-6}), ConfigError);
}

TEST(Gradcheck, CsvHasOneRowPerTensor) {
  const auto r = gradcheck<double>(parse_arch(kTwoBlock), BackpropMode::hybrid, {1, 2, 1, 1e-6});
  const std::string csv = gradcheck_csv(r);
  EXPECT_EQ(csv.rfind("tensor,mode,vs_stored,vs_numeric\n", 0), 0U);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.vs_stored.size() + 1);
}
