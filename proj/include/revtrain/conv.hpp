#pragma once

#include <cstdint>

#include "revtrain/tensor.hpp"

namespace revtrain {

// Kernels are stored as Shape{c_out, c_in, k_h, k_w}; biases as {1, c_out, 1, 1}.
struct ConvGeometry {
  int stride = 1;
  int padding = 0;
};

Shape conv_output_shape(const Shape& input, const Shape& kernel, ConvGeometry geo);

// Counts kernel applications: one per conv2d_* call over a whole batch.
struct ConvCounts {
  std::int64_t forward = 0;
  std::int64_t backward_input = 0;
  std::int64_t backward_weight = 0;

  std::int64_t backward_total() const { return backward_input + backward_weight; }
};

class ConvCounter {
 public:
  static void reset();
  static ConvCounts snapshot();
  static void count_forward();
  static void count_backward_input();
  static void count_backward_weight();
};

// Cross-correlation (no kernel flip). `out` is overwritten; bias may be null.
template <typename T>
void conv2d_forward_into(ChannelView<const T> x, const BasicTensor<T>& kernel,
                         const BasicTensor<T>* bias, ConvGeometry geo, ChannelView<T> out);

// grad_in is overwritten with dL/dx.
template <typename T>
void conv2d_backward_input_into(ChannelView<const T> grad_out, const BasicTensor<T>& kernel,
                                ConvGeometry geo, ChannelView<T> grad_in);

// Accumulates dL/dkernel into grad_kernel and per-channel sums of grad_out into
// grad_bias (if non-null).
template <typename T>
void conv2d_backward_weight_accumulate(ChannelView<const T> x, ChannelView<const T> grad_out,
                                       ConvGeometry geo, BasicTensor<T>& grad_kernel,
                                       BasicTensor<T>* grad_bias);

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& bias, int stride, int padding);

template <typename T>
BasicTensor<T> conv2d_backward_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& kernel,
                                     const Shape& input_shape, int stride, int padding);

template <typename T>
struct ConvWeightGrads {
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

template <typename T>
ConvWeightGrads<T> conv2d_backward_weight(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                          const Shape& kernel_shape, int stride, int padding);

}  // namespace revtrain
