#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "revtrain/tensor.hpp"

namespace revtrain {

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

// In-place dst += src / dst -= src over matching channel views.
template <typename T>
void add_into(ChannelView<T> dst, ChannelView<const T> src);
template <typename T>
void sub_into(ChannelView<T> dst, ChannelView<const T> src);
// dst = a - b elementwise, all three views of identical shape.
template <typename T>
void difference_into(ChannelView<T> dst, ChannelView<const T> a, ChannelView<const T> b);
template <typename T>
void copy_into(ChannelView<T> dst, ChannelView<const T> src);
template <typename T>
void fill(ChannelView<T> dst, T value);

// Sums accumulate in double regardless of T.
template <typename T>
double sum_sq_norm(const BasicTensor<T>& x);
template <typename T>
double sum_sq_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);
// ||a - b|| / ||b||; returns ||a - b|| when b is all zeros.
template <typename T>
double relative_l2_error(const BasicTensor<T>& a, const BasicTensor<T>& b);
// ||a||^2 / ||a - b||^2 with b the reference; +inf when they are identical.
template <typename T>
double snr(const BasicTensor<T>& reconstructed, const BasicTensor<T>& reference);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (divide by count)
};
// Statistics over (bs, h, w) for each channel.
template <typename T>
ChannelStats channel_mean_var(ChannelView<const T> x);
template <typename T>
ChannelStats channel_mean_var(const BasicTensor<T>& x) {
  return channel_mean_var(x.view());
}

// Split at channel `at` (0 < at < c) into two fresh tensors.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& x, std::int64_t at);
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Seeded i.i.d. normal samples (Pcg32 stream 0, Box-Muller).
template <typename T>
BasicTensor<T> gaussian(const Shape& shape, double mean, double stddev, std::uint64_t seed);

}  // namespace revtrain

namespace revtrain {

struct GradientAgreement {
  double worst = 0.0;  // largest per-tensor relative error
  std::size_t worst_index = 0;
};

// Per-tensor ||a_i - b_i|| / max(||b_i||, floor * ||b||_all), with b the
// reference. The floor keeps tensors whose exact gradient vanishes (a bias
// feeding straight into batch norm) from dominating with round-off; floor < 0
// picks 1e-3 for float and 1e-6 for double.
template <typename T>
GradientAgreement compare_gradients(const std::vector<BasicTensor<T>>& a,
                                    const std::vector<BasicTensor<T>>& b, double floor = -1.0);

}  // namespace revtrain
