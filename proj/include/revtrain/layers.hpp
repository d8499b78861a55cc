#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "revtrain/conv.hpp"
#include "revtrain/rng.hpp"
#include "revtrain/tensor.hpp"

namespace revtrain {

// train: batch statistics (cached, running averages updated); eval: running
// statistics; replay: the cached batch statistics of the last train pass.
enum class Phase { train, eval, replay };

template <typename T>
struct Param {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Param() = default;
  Param(std::string n, BasicTensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

// Stack of tensors retained between forward and backward (stored-activation
// backprop). Layers push in forward order and pop in reverse.
template <typename T>
using Stash = std::vector<BasicTensor<T>>;

template <typename T>
BasicTensor<T> pop(Stash<T>& stash);

// Kaiming-normal kernel, zero bias.
template <typename T>
BasicTensor<T> kaiming_kernel(const Shape& kernel_shape, Pcg32& rng);

// Plain k x k convolution, stride 1, "same" padding. Not invertible.
template <typename T>
class Conv {
 public:
  Conv(std::int64_t c_in, std::int64_t c_out, int k, Pcg32& rng);

  std::int64_t c_in() const { return kernel_.value.shape().c; }
  std::int64_t c_out() const { return kernel_.value.shape().bs; }
  int k() const { return static_cast<int>(kernel_.value.shape().h); }
  ConvGeometry geometry() const { return {1, k() / 2}; }

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  // Replaces `a` by the output; the input moves onto the stash.
  void forward_stored(BasicTensor<T>& a, Stash<T>& stash) const;
  void backward_stored(Stash<T>& stash, BasicTensor<T>& g);
  BasicTensor<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

  std::vector<Param<T>*> params() { return {&kernel_, &bias_}; }
  Param<T>& kernel() { return kernel_; }
  Param<T>& bias() { return bias_; }

 private:
  Param<T> kernel_;
  Param<T> bias_;
};

/// Reparameterized invertible batch normalization.
///
/// Forward:  y = s * (x - mean) / (sqrt(var) + eps) + beta,  s = |gamma| + eps_i
/// Inverse:  x = (sqrt(var) + eps) * (y - beta) / s + mean
///
/// The scale floor eps_i keeps s >= eps_i, so the inverse never divides by a
/// vanishing scale. Batch statistics of the last training forward are cached
/// (2c scalars) and reused by the inverse and by backward.
template <typename T>
class InvBatchNorm {
 public:
  struct Options {
    double eps = 1e-5;
    double eps_i = 0.1;
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  };

  InvBatchNorm(std::int64_t channels, Options options);
  explicit InvBatchNorm(std::int64_t channels) : InvBatchNorm(channels, Options{}) {}

  std::int64_t channels() const { return gamma_.value.numel(); }
  const Options& options() const { return options_; }
  T scale(std::int64_t c) const;

  void forward_(BasicTensor<T>& x, Phase phase);
  BasicTensor<T> forward(const BasicTensor<T>& x, Phase phase);
  void inverse_(BasicTensor<T>& y) const;
  BasicTensor<T> inverse(const BasicTensor<T>& y) const;
  // Full batch-norm backward (statistics depend on x). `g` is overwritten by
  // dL/dx; parameter gradients accumulate.
  void backward_(const BasicTensor<T>& x, BasicTensor<T>& g);
  BasicTensor<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

  void forward_stored(BasicTensor<T>& a, Stash<T>& stash, Phase phase = Phase::train);
  void backward_stored(Stash<T>& stash, BasicTensor<T>& g);
  // Reconstructs the input in place, then backpropagates through it.
  void invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g);

  bool has_cached_stats() const { return !cached_mean_.empty(); }
  const BasicTensor<T>& cached_mean() const { return cached_mean_; }
  const BasicTensor<T>& cached_var() const { return cached_var_; }
  void set_cached_stats(BasicTensor<T> mean, BasicTensor<T> var);
  const BasicTensor<T>& running_mean() const { return running_mean_; }
  const BasicTensor<T>& running_var() const { return running_var_; }
  BasicTensor<T>& running_mean() { return running_mean_; }
  BasicTensor<T>& running_var() { return running_var_; }

  std::vector<Param<T>*> params() { return {&gamma_, &beta_}; }
  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }

 private:
  void require_channels(const Shape& s, const char* op) const;

  Options options_;
  Param<T> gamma_;
  Param<T> beta_;
  BasicTensor<T> running_mean_;
  BasicTensor<T> running_var_;
  BasicTensor<T> cached_mean_;
  BasicTensor<T> cached_var_;
};

/// Invertible leaky ReLU with negative-side divisor n > 1:
/// y = x (x > 0) or x / n; inverse y (y > 0) or y * n.
template <typename T>
class InvLeakyReLU {
 public:
  explicit InvLeakyReLU(double n);

  double n() const { return n_; }
  void forward_(BasicTensor<T>& x) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  void inverse_(BasicTensor<T>& y) const;
  BasicTensor<T> inverse(const BasicTensor<T>& y) const;
  // g *= 1 where sign_source > 0, 1/n elsewhere. Either the (reconstructed)
  // input or the output may serve as sign source.
  void backward_(const BasicTensor<T>& sign_source, BasicTensor<T>& g) const;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& sign_source) const;

  void forward_stored(BasicTensor<T>& a, Stash<T>& stash) const;
  void backward_stored(Stash<T>& stash, BasicTensor<T>& g) const;
  void invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g) const;

 private:
  double n_;
  T inv_n_;
};

/// Additive coupling convolution over a channel split x = (x1, x2):
/// y1 = x1 + F(x2), y2 = x2 + G(y1), with F and G single k x k convolutions
/// mapping c/2 -> c/2 channels.
template <typename T>
class InvConv {
 public:
  InvConv(std::int64_t channels, int k, Pcg32& rng);

  std::int64_t channels() const { return 2 * f_kernel_.value.shape().bs; }
  int k() const { return static_cast<int>(f_kernel_.value.shape().h); }
  ConvGeometry geometry() const { return {1, k() / 2}; }

  void forward_(BasicTensor<T>& x) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  void inverse_(BasicTensor<T>& y) const;
  BasicTensor<T> inverse(const BasicTensor<T>& y) const;
  // Backward given the two convolution inputs (x2 for F, y1 for G). `g` holds
  // (dL/dy1, dL/dy2) and is overwritten with (dL/dx1, dL/dx2).
  void backward_(ChannelView<const T> x2, ChannelView<const T> y1, BasicTensor<T>& g);
  BasicTensor<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

  // Stashes x2 then y1 (c channels total).
  void forward_stored(BasicTensor<T>& a, Stash<T>& stash) const;
  void backward_stored(Stash<T>& stash, BasicTensor<T>& g);
  void invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g);

  std::vector<Param<T>*> params() { return {&f_kernel_, &f_bias_, &g_kernel_, &g_bias_}; }
  Param<T>& f_kernel() { return f_kernel_; }
  Param<T>& f_bias() { return f_bias_; }
  Param<T>& g_kernel() { return g_kernel_; }
  Param<T>& g_bias() { return g_bias_; }

 private:
  void require_shape(const Shape& s, const char* op) const;

  Param<T> f_kernel_;
  Param<T> f_bias_;
  Param<T> g_kernel_;
  Param<T> g_bias_;
};

enum class PoolKind { channel, batch };

/// Volume-preserving 2x2 pooling by index permutation.
///
/// Channel pooling: (bs, c, h, w) -> (bs, 4c, h/2, w/2); element (b, ch, 2i+dy, 2j+dx)
/// lands in channel 4*ch + (2*dy + dx).
/// Batch pooling:   (bs, c, h, w) -> (4bs, c, h/2, w/2); it lands in sample
/// 4*b + (2*dy + dx), so the virtual samples of one image stay contiguous.
/// Window positions are ordered row-major: top-left, top-right, bottom-left,
/// bottom-right. Both directions run in place.
template <typename T>
class InvPool {
 public:
  explicit InvPool(PoolKind kind) : kind_(kind) {}

  PoolKind kind() const { return kind_; }
  Shape output_shape(const Shape& in) const;
  Shape input_shape(const Shape& out) const;

  void forward_(BasicTensor<T>& x) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  void inverse_(BasicTensor<T>& y) const;
  BasicTensor<T> inverse(const BasicTensor<T>& y) const;
  // The gradient of a permutation is its inverse applied to the gradient.
  void backward_(BasicTensor<T>& g) const { inverse_(g); }
  void invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g) const {
    inverse_(a);
    inverse_(g);
  }

 private:
  PoolKind kind_;
};

// 2x2 / stride-2 max pooling (not invertible; input retained for backward).
template <typename T>
class MaxPool {
 public:
  Shape output_shape(const Shape& in) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  BasicTensor<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) const;
  void forward_stored(BasicTensor<T>& a, Stash<T>& stash) const;
  void backward_stored(Stash<T>& stash, BasicTensor<T>& g) const;
};

/// Linear classifier over features averaged across (h, w) and across each
/// group of `group_size` consecutive virtual samples produced by batch pooling.
template <typename T>
class ClassifierHead {
 public:
  ClassifierHead(std::int64_t channels, std::int64_t num_classes, std::int64_t group_size,
                 Pcg32& rng);

  std::int64_t channels() const { return weight_.value.shape().c; }
  std::int64_t num_classes() const { return weight_.value.shape().bs; }
  std::int64_t group_size() const { return group_size_; }

  // Logits shaped (true_bs, num_classes, 1, 1).
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  BasicTensor<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_logits);

  std::vector<Param<T>*> params() { return {&weight_, &bias_}; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  void require_input(const Shape& s) const;

  Param<T> weight_;  // (num_classes, channels, 1, 1)
  Param<T> bias_;    // (1, num_classes, 1, 1)
  std::int64_t group_size_;
};

struct LossResult {
  double loss = 0.0;        // mean over the batch
  std::int64_t correct = 0;  // argmax hits
};

// Mean softmax cross-entropy; writes dL/dlogits into grad (same shape).
template <typename T>
LossResult softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                                 BasicTensor<T>* grad);

}  // namespace revtrain
