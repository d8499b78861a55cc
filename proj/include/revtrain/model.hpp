#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "revtrain/arch.hpp"
#include "revtrain/layers.hpp"

namespace revtrain {

template <typename T>
using Layer = std::variant<Conv<T>, InvConv<T>, InvBatchNorm<T>, InvLeakyReLU<T>, InvPool<T>, MaxPool<T>>;

template <typename T>
struct Module {
  std::vector<Layer<T>> layers;
};

// Reversible: y1 = x1 + F(x2), y2 = x2 + G(y1). Residual: y = x + F(x) (g unused).
template <typename T>
struct Block {
  BlockKind kind = BlockKind::reversible;
  Module<T> f;
  Module<T> g;
};

template <typename T>
using Segment = std::variant<Layer<T>, Block<T>>;

// SNR of a reconstructed layer input against the true input from the forward
// pass. `depth` is the forward-order index of the traced tensor.
struct SnrEntry {
  std::string name;
  int segment = 0;
  char module = '-';  // '-' standalone / block input, 'F' or 'G' inside a block
  int layer = -1;
  int depth = 0;
  bool block_input = false;
  double snr = 0.0;
};

struct SnrTrace {
  std::vector<SnrEntry> entries;  // in backward order
};

// What a forward pass leaves behind for backward.
template <typename T>
struct SavedState {
  BackpropMode mode = BackpropMode::stored;
  bool valid = false;
  BasicTensor<T> output;  // final activation (classifier-head input)
  Stash<T> stash;         // stored layer inputs in forward order
  // Tracing only: true inputs keyed by name, plus their forward order.
  std::map<std::string, BasicTensor<T>> shadow;
  std::map<std::string, int> shadow_depth;

  std::int64_t bytes() const;  // output + stash
};

template <typename T>
class SequentialModel {
 public:
  SequentialModel(ArchSpec spec, std::uint64_t seed);

  const ArchSpec& spec() const { return spec_; }
  std::vector<Segment<T>>& segments() { return segments_; }
  const std::vector<Segment<T>>& segments() const { return segments_; }
  ClassifierHead<T>& head() { return head_; }
  const ClassifierHead<T>& head() const { return head_; }

  // Stable names: s<i>.<kind>.<param>, s<i>.F<j>.<kind>.<param>, head.<param>.
  std::vector<std::pair<std::string, Param<T>*>> named_params();
  std::vector<Param<T>*> params();
  // Batch-norm running statistics, for checkpoints.
  std::vector<std::pair<std::string, BasicTensor<T>*>> named_buffers();
  void zero_grad();
  std::int64_t parameter_count();
  // Bytes of cached batch statistics (2c scalars per batch norm).
  std::int64_t stats_bytes() const;

 private:
  ArchSpec spec_;
  std::vector<Segment<T>> segments_;
  ClassifierHead<T> head_;
};

// Training forward. `x` is consumed as the working buffer. Throws ConfigError
// when the architecture cannot run in `mode`.
template <typename T>
BasicTensor<T> model_forward(SequentialModel<T>& model, BasicTensor<T> x, BackpropMode mode,
                             SavedState<T>& saved, bool trace = false);

// Accumulates parameter gradients; consumes `saved`. Throws StateError when
// `saved` was not produced by a forward in `mode`.
template <typename T>
SnrTrace model_backward(SequentialModel<T>& model, SavedState<T>& saved,
                        const BasicTensor<T>& grad_logits, BackpropMode mode);

// Inference with running batch-norm statistics; nothing is retained.
template <typename T>
BasicTensor<T> model_predict(SequentialModel<T>& model, BasicTensor<T> x);

// Block forward / analytic inverse using the cached batch statistics of its
// modules. Nothing inside the modules is retained.
template <typename T>
void block_forward_(Block<T>& block, BasicTensor<T>& x, Phase phase);
template <typename T>
void block_inverse_(Block<T>& block, BasicTensor<T>& y);
template <typename T>
BasicTensor<T> block_inverse(Block<T>& block, const BasicTensor<T>& y);

}  // namespace revtrain
