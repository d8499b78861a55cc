#include "revtrain/conv.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <vector>

#include "revtrain/errors.hpp"

extern "C" void openblas_set_num_threads(int);

namespace revtrain {

namespace {

std::atomic<std::int64_t> g_forward{0};
std::atomic<std::int64_t> g_backward_input{0};
std::atomic<std::int64_t> g_backward_weight{0};

// Columns per GEMM: small spatial planes are batched across samples.
constexpr std::int64_t kMinGemmColumns = 256;

void pin_blas_threads() {
  // A single BLAS thread keeps every reduction order fixed.
  static const bool pinned = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)pinned;
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
std::vector<T>& scratch(int slot, std::size_t elements) {
  thread_local std::vector<T> buffers[3];
  auto& buf = buffers[slot];
  if (buf.size() < elements) buf.resize(elements);
  std::int64_t total = 0;
  for (const auto& b : buffers) total += static_cast<std::int64_t>(b.size() * sizeof(T));
  MemoryCounter::instance().on_workspace(total);
  return buf;
}

struct Plan {
  std::int64_t c_in, c_out, h, w, kh, kw, ho, wo;
  int stride, padding;
  std::int64_t k() const { return c_in * kh * kw; }
  std::int64_t n() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
  std::int64_t group(std::int64_t bs) const {
    return std::clamp<std::int64_t>((kMinGemmColumns + n() - 1) / n(), 1, bs);
  }
};

Plan make_plan(const Shape& in, const Shape& kernel, ConvGeometry geo) {
  const Shape out = conv_output_shape(in, kernel, geo);
  return {in.c, kernel.bs, in.h, in.w, kernel.h, kernel.w, out.h, out.w, geo.stride, geo.padding};
}

template <typename T>
void im2col(const T* x, const Plan& p, T* col, std::int64_t ld) {
  for (std::int64_t ci = 0; ci < p.c_in; ++ci) {
    const T* plane = x + ci * p.h * p.w;
    for (std::int64_t ky = 0; ky < p.kh; ++ky) {
      for (std::int64_t kx = 0; kx < p.kw; ++kx) {
        T* row = col + ((ci * p.kh + ky) * p.kw + kx) * ld;
        for (std::int64_t oy = 0; oy < p.ho; ++oy) {
          const std::int64_t iy = oy * p.stride - p.padding + ky;
          T* dst = row + oy * p.wo;
          if (iy < 0 || iy >= p.h) {
            std::fill(dst, dst + p.wo, T{0});
            continue;
          }
          const T* src = plane + iy * p.w;
          for (std::int64_t ox = 0; ox < p.wo; ++ox) {
            const std::int64_t ix = ox * p.stride - p.padding + kx;
            dst[ox] = (ix >= 0 && ix < p.w) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::int64_t ld, const Plan& p, T* x) {
  for (std::int64_t ci = 0; ci < p.c_in; ++ci) {
    T* plane = x + ci * p.h * p.w;
    for (std::int64_t ky = 0; ky < p.kh; ++ky) {
      for (std::int64_t kx = 0; kx < p.kw; ++kx) {
        const T* row = col + ((ci * p.kh + ky) * p.kw + kx) * ld;
        for (std::int64_t oy = 0; oy < p.ho; ++oy) {
          const std::int64_t iy = oy * p.stride - p.padding + ky;
          if (iy < 0 || iy >= p.h) continue;
          const T* src = row + oy * p.wo;
          T* dst = plane + iy * p.w;
          for (std::int64_t ox = 0; ox < p.wo; ++ox) {
            const std::int64_t ix = ox * p.stride - p.padding + kx;
            if (ix >= 0 && ix < p.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void require_kernel(const Shape& x, const Shape& kernel, const char* op) {
  if (x.c != kernel.c) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.c) +
                     " channels but kernel expects " + std::to_string(kernel.c));
  }
}

}  // namespace

Shape conv_output_shape(const Shape& input, const Shape& kernel, ConvGeometry geo) {
  if (geo.stride < 1 || geo.padding < 0) throw ShapeError("conv: stride must be >= 1, padding >= 0");
  const std::int64_t hp = input.h + 2 * geo.padding - kernel.h;
  const std::int64_t wp = input.w + 2 * geo.padding - kernel.w;
  if (hp < 0 || wp < 0) {
    throw ShapeError("conv: kernel " + kernel.str() + " larger than padded input " + input.str());
  }
  return {input.bs, kernel.bs, hp / geo.stride + 1, wp / geo.stride + 1};
}

void ConvCounter::reset() {
  g_forward = 0;
  g_backward_input = 0;
  g_backward_weight = 0;
}

ConvCounts ConvCounter::snapshot() {
  return {g_forward.load(), g_backward_input.load(), g_backward_weight.load()};
}

void ConvCounter::count_forward() { ++g_forward; }
void ConvCounter::count_backward_input() { ++g_backward_input; }
void ConvCounter::count_backward_weight() { ++g_backward_weight; }

template <typename T>
void conv2d_forward_into(ChannelView<const T> x, const BasicTensor<T>& kernel,
                         const BasicTensor<T>* bias, ConvGeometry geo, ChannelView<T> out) {
  pin_blas_threads();
  require_kernel(x.shape, kernel.shape(), "conv2d_forward");
  const Shape expected = conv_output_shape(x.shape, kernel.shape(), geo);
  if (!(out.shape == expected)) {
    throw ShapeError("conv2d_forward: output view " + out.shape.str() + " but expected " +
                     expected.str());
  }
  if (bias != nullptr && bias->numel() != kernel.shape().bs) {
    throw ShapeError("conv2d_forward: bias length " + std::to_string(bias->numel()) +
                     " does not match c_out " + std::to_string(kernel.shape().bs));
  }
  ConvCounter::count_forward();
  const Plan p = make_plan(x.shape, kernel.shape(), geo);
  const std::int64_t bs = x.shape.bs;
  const std::int64_t n = p.n();
  const std::int64_t k = p.k();
  const std::int64_t g = p.group(bs);

  for (std::int64_t s0 = 0; s0 < bs; s0 += g) {
    const std::int64_t gs = std::min(g, bs - s0);
    const std::int64_t ld = gs * n;
    const T* col = nullptr;
    if (gs == 1 && p.pointwise()) {
      col = x.sample(s0);
    } else {
      auto& buf = scratch<T>(0, static_cast<std::size_t>(k * ld));
      for (std::int64_t j = 0; j < gs; ++j) im2col(x.sample(s0 + j), p, buf.data() + j * n, ld);
      col = buf.data();
    }
    if (gs == 1) {
      T* dst = out.sample(s0);
      gemm(false, false, int(p.c_out), int(n), int(k), T{1}, kernel.data(), int(k), col, int(ld),
           T{0}, dst, int(n));
      if (bias != nullptr) {
        for (std::int64_t co = 0; co < p.c_out; ++co) {
          const T bv = bias->data()[co];
          T* row = dst + co * n;
          for (std::int64_t i = 0; i < n; ++i) row[i] += bv;
        }
      }
    } else {
      auto& tmp = scratch<T>(1, static_cast<std::size_t>(p.c_out * ld));
      gemm(false, false, int(p.c_out), int(ld), int(k), T{1}, kernel.data(), int(k), col, int(ld),
           T{0}, tmp.data(), int(ld));
      for (std::int64_t j = 0; j < gs; ++j) {
        for (std::int64_t co = 0; co < p.c_out; ++co) {
          const T bv = bias != nullptr ? bias->data()[co] : T{0};
          const T* src = tmp.data() + co * ld + j * n;
          T* dst = out.plane(s0 + j, co);
          for (std::int64_t i = 0; i < n; ++i) dst[i] = src[i] + bv;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input_into(ChannelView<const T> grad_out, const BasicTensor<T>& kernel,
                                ConvGeometry geo, ChannelView<T> grad_in) {
  pin_blas_threads();
  require_kernel(grad_in.shape, kernel.shape(), "conv2d_backward_input");
  const Shape expected = conv_output_shape(grad_in.shape, kernel.shape(), geo);
  if (!(grad_out.shape == expected)) {
    throw ShapeError("conv2d_backward_input: grad_out " + grad_out.shape.str() +
                     " does not match forward output " + expected.str());
  }
  ConvCounter::count_backward_input();
  const Plan p = make_plan(grad_in.shape, kernel.shape(), geo);
  const std::int64_t bs = grad_in.shape.bs;
  const std::int64_t n = p.n();
  const std::int64_t k = p.k();
  const std::int64_t g = p.group(bs);

  for (std::int64_t s0 = 0; s0 < bs; s0 += g) {
    const std::int64_t gs = std::min(g, bs - s0);
    const std::int64_t ld = gs * n;
    const T* gy = nullptr;
    if (gs == 1) {
      gy = grad_out.sample(s0);
    } else {
      auto& buf = scratch<T>(1, static_cast<std::size_t>(p.c_out * ld));
      for (std::int64_t j = 0; j < gs; ++j) {
        for (std::int64_t co = 0; co < p.c_out; ++co) {
          std::memcpy(buf.data() + co * ld + j * n, grad_out.plane(s0 + j, co),
                      static_cast<std::size_t>(n) * sizeof(T));
        }
      }
      gy = buf.data();
    }
    if (gs == 1 && p.pointwise()) {
      gemm(true, false, int(k), int(n), int(p.c_out), T{1}, kernel.data(), int(k), gy, int(ld),
           T{0}, grad_in.sample(s0), int(n));
      continue;
    }
    auto& col = scratch<T>(0, static_cast<std::size_t>(k * ld));
    gemm(true, false, int(k), int(ld), int(p.c_out), T{1}, kernel.data(), int(k), gy, int(ld), T{0},
         col.data(), int(ld));
    for (std::int64_t j = 0; j < gs; ++j) {
      T* dst = grad_in.sample(s0 + j);
      for (std::int64_t ci = 0; ci < p.c_in; ++ci) {
        std::fill(dst + ci * p.h * p.w, dst + (ci + 1) * p.h * p.w, T{0});
      }
      col2im_add(col.data() + j * n, ld, p, dst);
    }
  }
}

template <typename T>
void conv2d_backward_weight_accumulate(ChannelView<const T> x, ChannelView<const T> grad_out,
                                       ConvGeometry geo, BasicTensor<T>& grad_kernel,
                                       BasicTensor<T>* grad_bias) {
  pin_blas_threads();
  require_kernel(x.shape, grad_kernel.shape(), "conv2d_backward_weight");
  const Shape expected = conv_output_shape(x.shape, grad_kernel.shape(), geo);
  if (!(grad_out.shape == expected)) {
    throw ShapeError("conv2d_backward_weight: grad_out " + grad_out.shape.str() +
                     " does not match forward output " + expected.str());
  }
  ConvCounter::count_backward_weight();
  const Plan p = make_plan(x.shape, grad_kernel.shape(), geo);
  const std::int64_t bs = x.shape.bs;
  const std::int64_t n = p.n();
  const std::int64_t k = p.k();
  const std::int64_t g = p.group(bs);

  for (std::int64_t s0 = 0; s0 < bs; s0 += g) {
    const std::int64_t gs = std::min(g, bs - s0);
    const std::int64_t ld = gs * n;
    const T* col = nullptr;
    if (gs == 1 && p.pointwise()) {
      col = x.sample(s0);
    } else {
      auto& buf = scratch<T>(0, static_cast<std::size_t>(k * ld));
      for (std::int64_t j = 0; j < gs; ++j) im2col(x.sample(s0 + j), p, buf.data() + j * n, ld);
      col = buf.data();
    }
    const T* gy = nullptr;
    if (gs == 1) {
      gy = grad_out.sample(s0);
    } else {
      auto& buf = scratch<T>(1, static_cast<std::size_t>(p.c_out * ld));
      for (std::int64_t j = 0; j < gs; ++j) {
        for (std::int64_t co = 0; co < p.c_out; ++co) {
          std::memcpy(buf.data() + co * ld + j * n, grad_out.plane(s0 + j, co),
                      static_cast<std::size_t>(n) * sizeof(T));
        }
      }
      gy = buf.data();
    }
    gemm(false, true, int(p.c_out), int(k), int(ld), T{1}, gy, int(ld), col, int(ld), T{1},
         grad_kernel.data(), int(k));
    if (grad_bias != nullptr) {
      for (std::int64_t co = 0; co < p.c_out; ++co) {
        const T* row = gy + co * ld;
        T acc{0};
        for (std::int64_t i = 0; i < ld; ++i) acc += row[i];
        grad_bias->data()[co] += acc;
      }
    }
  }
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& bias, int stride, int padding) {
  const ConvGeometry geo{stride, padding};
  require_kernel(x.shape(), kernel.shape(), "conv2d_forward");
  BasicTensor<T> out(conv_output_shape(x.shape(), kernel.shape(), geo));
  conv2d_forward_into(x.view(), kernel, bias.empty() ? nullptr : &bias, geo, out.view());
  return out;
}

template <typename T>
BasicTensor<T> conv2d_backward_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& kernel,
                                     const Shape& input_shape, int stride, int padding) {
  BasicTensor<T> grad_in(input_shape);
  conv2d_backward_input_into(grad_out.view(), kernel, ConvGeometry{stride, padding},
                             grad_in.view());
  return grad_in;
}

template <typename T>
ConvWeightGrads<T> conv2d_backward_weight(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                          const Shape& kernel_shape, int stride, int padding) {
  ConvWeightGrads<T> grads{BasicTensor<T>(kernel_shape), BasicTensor<T>(Shape{1, kernel_shape.bs, 1, 1})};
  conv2d_backward_weight_accumulate(x.view(), grad_out.view(), ConvGeometry{stride, padding},
                                    grads.kernel, &grads.bias);
  return grads;
}

#define REVTRAIN_INSTANTIATE_CONV(T)                                                          \
  template void conv2d_forward_into(ChannelView<const T>, const BasicTensor<T>&,              \
                                    const BasicTensor<T>*, ConvGeometry, ChannelView<T>);     \
  template void conv2d_backward_input_into(ChannelView<const T>, const BasicTensor<T>&,       \
                                           ConvGeometry, ChannelView<T>);                     \
  template void conv2d_backward_weight_accumulate(ChannelView<const T>, ChannelView<const T>, \
                                                  ConvGeometry, BasicTensor<T>&,              \
                                                  BasicTensor<T>*);                           \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                         const BasicTensor<T>&, int, int);                    \
  template BasicTensor<T> conv2d_backward_input(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                const Shape&, int, int);                      \
  template ConvWeightGrads<T> conv2d_backward_weight(const BasicTensor<T>&,                   \
                                                     const BasicTensor<T>&, const Shape&, int, int);

REVTRAIN_INSTANTIATE_CONV(float)
REVTRAIN_INSTANTIATE_CONV(double)

}  // namespace revtrain
