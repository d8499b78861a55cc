#include "revtrain/layers.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "revtrain/errors.hpp"
#include "revtrain/ops.hpp"

namespace revtrain {

template <typename T>
BasicTensor<T> pop(Stash<T>& stash) {
  if (stash.empty()) throw StateError("backward: saved-state stack is empty");
  BasicTensor<T> out = std::move(stash.back());
  stash.pop_back();
  return out;
}

template <typename T>
BasicTensor<T> kaiming_kernel(const Shape& kernel_shape, Pcg32& rng) {
  const double fan_in = static_cast<double>(kernel_shape.c * kernel_shape.h * kernel_shape.w);
  const double stddev = std::sqrt(2.0 / fan_in);
  BasicTensor<T> k(kernel_shape);
  for (T& v : k.values()) v = static_cast<T>(stddev * rng.normal());
  return k;
}

// ---- Conv ------------------------------------------------------------------

template <typename T>
Conv<T>::Conv(std::int64_t c_in, std::int64_t c_out, int k, Pcg32& rng) {
  if (c_in < 1 || c_out < 1 || k < 1 || k % 2 == 0) {
    throw ConfigError("conv: need c_in, c_out >= 1 and odd k, got c_in=" + std::to_string(c_in) +
                      " c_out=" + std::to_string(c_out) + " k=" + std::to_string(k));
  }
  kernel_ = Param<T>("kernel", kaiming_kernel<T>(Shape{c_out, c_in, k, k}, rng));
  bias_ = Param<T>("bias", BasicTensor<T>(Shape{1, c_out, 1, 1}));
}

template <typename T>
BasicTensor<T> Conv<T>::forward(const BasicTensor<T>& x) const {
  const auto geo = geometry();
  return conv2d_forward(x, kernel_.value, bias_.value, geo.stride, geo.padding);
}

template <typename T>
void Conv<T>::forward_stored(BasicTensor<T>& a, Stash<T>& stash) const {
  stash.push_back(std::move(a));
  a = forward(stash.back());
}

template <typename T>
BasicTensor<T> Conv<T>::backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  const auto geo = geometry();
  if (!(grad_out.shape() == conv_output_shape(x.shape(), kernel_.value.shape(), geo))) {
    throw ShapeError("conv backward: gradient " + grad_out.shape().str() + " does not match input " +
                     x.shape().str());
  }
  conv2d_backward_weight_accumulate(x.view(), grad_out.view(), geo, kernel_.grad, &bias_.grad);
  BasicTensor<T> gx(x.shape());
  conv2d_backward_input_into(grad_out.view(), kernel_.value, geo, gx.view());
  return gx;
}

template <typename T>
void Conv<T>::backward_stored(Stash<T>& stash, BasicTensor<T>& g) {
  BasicTensor<T> x = pop(stash);
  BasicTensor<T> gx = backward(x, g);
  x.release();
  g = std::move(gx);
}

// ---- InvBatchNorm -------------------------------------------------------------

template <typename T>
InvBatchNorm<T>::InvBatchNorm(std::int64_t channels, Options options) : options_(options) {
  if (channels < 1) throw ConfigError("batchnorm: channels must be >= 1");
  if (!(options.eps_i > 0.0)) throw ConfigError("batchnorm: eps_i must be > 0");
  if (!(options.eps >= 0.0)) throw ConfigError("batchnorm: eps must be >= 0");
  const Shape s{1, channels, 1, 1};
  gamma_ = Param<T>("gamma", BasicTensor<T>(s, T(1)));
  beta_ = Param<T>("beta", BasicTensor<T>(s));
  running_mean_ = BasicTensor<T>(s);
  running_var_ = BasicTensor<T>(s, T(1));
}

template <typename T>
T InvBatchNorm<T>::scale(std::int64_t c) const {
  return static_cast<T>(std::abs(static_cast<double>(gamma_.value.data()[c])) + options_.eps_i);
}

template <typename T>
void InvBatchNorm<T>::require_channels(const Shape& s, const char* op) const {
  if (s.c != channels()) {
    throw ShapeError(std::string("batchnorm ") + op + ": expected " + std::to_string(channels()) +
                     " channels, got " + s.str());
  }
}

template <typename T>
void InvBatchNorm<T>::set_cached_stats(BasicTensor<T> mean, BasicTensor<T> var) {
  const Shape s{1, channels(), 1, 1};
  if (!(mean.shape() == s) || !(var.shape() == s)) throw ShapeError("batchnorm: bad stats shape");
  cached_mean_ = std::move(mean);
  cached_var_ = std::move(var);
}

template <typename T>
void InvBatchNorm<T>::forward_(BasicTensor<T>& x, Phase phase) {
  require_channels(x.shape(), "forward");
  const Shape& s = x.shape();
  const T* mean_src = nullptr;
  const T* var_src = nullptr;
  if (phase == Phase::train) {
    const ChannelStats stats = channel_mean_var<T>(std::as_const(x).view());
    if (cached_mean_.empty()) {
      cached_mean_ = BasicTensor<T>(Shape{1, s.c, 1, 1});
      cached_var_ = BasicTensor<T>(Shape{1, s.c, 1, 1});
    }
    const double m = options_.momentum;
    for (std::int64_t c = 0; c < s.c; ++c) {
      cached_mean_.data()[c] = static_cast<T>(stats.mean[c]);
      cached_var_.data()[c] = static_cast<T>(stats.var[c]);
      running_mean_.data()[c] =
          static_cast<T>(m * running_mean_.data()[c] + (1.0 - m) * stats.mean[c]);
      running_var_.data()[c] = static_cast<T>(m * running_var_.data()[c] + (1.0 - m) * stats.var[c]);
    }
    mean_src = cached_mean_.data();
    var_src = cached_var_.data();
  } else if (phase == Phase::replay) {
    if (!has_cached_stats()) throw StateError("batchnorm replay: no cached batch statistics");
    mean_src = cached_mean_.data();
    var_src = cached_var_.data();
  } else {
    mean_src = running_mean_.data();
    var_src = running_var_.data();
  }
  const std::int64_t plane = s.plane();
  for (std::int64_t c = 0; c < s.c; ++c) {
    const double d = std::sqrt(static_cast<double>(var_src[c])) + options_.eps;
    const T a = static_cast<T>(static_cast<double>(scale(c)) / d);
    const T mu = mean_src[c];
    const T b = beta_.value.data()[c];
    for (std::int64_t n = 0; n < s.bs; ++n) {
      T* p = x.view().plane(n, c);
      for (std::int64_t i = 0; i < plane; ++i) p[i] = a * (p[i] - mu) + b;
    }
  }
}

template <typename T>
BasicTensor<T> InvBatchNorm<T>::forward(const BasicTensor<T>& x, Phase phase) {
  BasicTensor<T> y = x;
  forward_(y, phase);
  return y;
}

template <typename T>
void InvBatchNorm<T>::inverse_(BasicTensor<T>& y) const {
  if (!has_cached_stats()) throw StateError("batchnorm inverse: no cached batch statistics");
  require_channels(y.shape(), "inverse");
  const Shape& s = y.shape();
  const std::int64_t plane = s.plane();
  for (std::int64_t c = 0; c < s.c; ++c) {
    const double d = std::sqrt(static_cast<double>(cached_var_.data()[c])) + options_.eps;
    const T r = static_cast<T>(d / static_cast<double>(scale(c)));
    const T mu = cached_mean_.data()[c];
    const T b = beta_.value.data()[c];
    for (std::int64_t n = 0; n < s.bs; ++n) {
      T* p = y.view().plane(n, c);
      for (std::int64_t i = 0; i < plane; ++i) p[i] = (p[i] - b) * r + mu;
    }
  }
}

template <typename T>
BasicTensor<T> InvBatchNorm<T>::inverse(const BasicTensor<T>& y) const {
  BasicTensor<T> x = y;
  inverse_(x);
  return x;
}

template <typename T>
void InvBatchNorm<T>::backward_(const BasicTensor<T>& x, BasicTensor<T>& g) {
  if (!has_cached_stats()) throw StateError("batchnorm backward: no cached batch statistics");
  require_channels(x.shape(), "backward");
  if (!(x.shape() == g.shape())) {
    throw ShapeError("batchnorm backward: " + x.shape().str() + " vs " + g.shape().str());
  }
  const Shape& s = x.shape();
  const std::int64_t plane = s.plane();
  const double m = static_cast<double>(s.bs * plane);
  for (std::int64_t c = 0; c < s.c; ++c) {
    const double mu = cached_mean_.data()[c];
    const double sigma = std::sqrt(static_cast<double>(cached_var_.data()[c]));
    const double d = sigma + options_.eps;
    const double sc = scale(c);
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::int64_t n = 0; n < s.bs; ++n) {
      const T* px = x.view().plane(n, c);
      const T* pg = g.view().plane(n, c);
      for (std::int64_t i = 0; i < plane; ++i) {
        sum_g += pg[i];
        sum_gx += static_cast<double>(pg[i]) * (static_cast<double>(px[i]) - mu);
      }
    }
    sum_gx /= d;  // sum of g * xhat
    const double gamma = gamma_.value.data()[c];
    gamma_.grad.data()[c] += static_cast<T>(gamma < 0.0 ? -sum_gx : sum_gx);
    beta_.grad.data()[c] += static_cast<T>(sum_g);

    const T k1 = static_cast<T>(sc / d);
    const T k0 = static_cast<T>(sc * sum_g / m / d);
    const T k2 = static_cast<T>(sigma > 0.0 ? sc * sum_gx / (m * sigma * d) : 0.0);
    const T mu_t = static_cast<T>(mu);
    for (std::int64_t n = 0; n < s.bs; ++n) {
      const T* px = x.view().plane(n, c);
      T* pg = g.view().plane(n, c);
      for (std::int64_t i = 0; i < plane; ++i) pg[i] = k1 * pg[i] - k0 - k2 * (px[i] - mu_t);
    }
  }
}

template <typename T>
BasicTensor<T> InvBatchNorm<T>::backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  BasicTensor<T> g = grad_out;
  backward_(x, g);
  return g;
}

template <typename T>
void InvBatchNorm<T>::forward_stored(BasicTensor<T>& a, Stash<T>& stash, Phase phase) {
  stash.push_back(a);
  forward_(a, phase);
}

template <typename T>
void InvBatchNorm<T>::backward_stored(Stash<T>& stash, BasicTensor<T>& g) {
  BasicTensor<T> x = pop(stash);
  backward_(x, g);
}

template <typename T>
void InvBatchNorm<T>::invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g) {
  inverse_(a);
  backward_(a, g);
}

// ---- InvLeakyReLU ------------------------------------------------------------

template <typename T>
InvLeakyReLU<T>::InvLeakyReLU(double n) : n_(n), inv_n_(static_cast<T>(1.0 / n)) {
  if (!(n > 1.0)) {
    throw ConfigError("leaky relu: negative-side divisor n must be > 1, got " + std::to_string(n));
  }
}

template <typename T>
void InvLeakyReLU<T>::forward_(BasicTensor<T>& x) const {
  const T n = static_cast<T>(n_);
  for (T& v : x.values()) v = v > T(0) ? v : v / n;
}

template <typename T>
BasicTensor<T> InvLeakyReLU<T>::forward(const BasicTensor<T>& x) const {
  BasicTensor<T> y = x;
  forward_(y);
  return y;
}

template <typename T>
void InvLeakyReLU<T>::inverse_(BasicTensor<T>& y) const {
  const T n = static_cast<T>(n_);
  for (T& v : y.values()) v = v > T(0) ? v : v * n;
}

template <typename T>
BasicTensor<T> InvLeakyReLU<T>::inverse(const BasicTensor<T>& y) const {
  BasicTensor<T> x = y;
  inverse_(x);
  return x;
}

template <typename T>
void InvLeakyReLU<T>::backward_(const BasicTensor<T>& sign_source, BasicTensor<T>& g) const {
  if (!(sign_source.shape() == g.shape())) {
    throw ShapeError("leaky relu backward: " + sign_source.shape().str() + " vs " + g.shape().str());
  }
  const T* s = sign_source.data();
  T* pg = g.data();
  for (std::int64_t i = 0; i < g.numel(); ++i) {
    if (!(s[i] > T(0))) pg[i] *= inv_n_;
  }
}

template <typename T>
BasicTensor<T> InvLeakyReLU<T>::backward(const BasicTensor<T>& grad_out,
                                          const BasicTensor<T>& sign_source) const {
  BasicTensor<T> g = grad_out;
  backward_(sign_source, g);
  return g;
}

template <typename T>
void InvLeakyReLU<T>::forward_stored(BasicTensor<T>& a, Stash<T>& stash) const {
  stash.push_back(a);
  forward_(a);
}

template <typename T>
void InvLeakyReLU<T>::backward_stored(Stash<T>& stash, BasicTensor<T>& g) const {
  BasicTensor<T> x = pop(stash);
  backward_(x, g);
}

template <typename T>
void InvLeakyReLU<T>::invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g) const {
  inverse_(a);
  backward_(a, g);
}

// ---- InvConv -------------------------------------------------------------------

template <typename T>
InvConv<T>::InvConv(std::int64_t channels, int k, Pcg32& rng) {
  if (channels < 2 || channels % 2 != 0) {
    throw ConfigError("invconv: channel count must be even and >= 2, got " +
                      std::to_string(channels));
  }
  if (k < 1 || k % 2 == 0) throw ConfigError("invconv: kernel size must be odd, got " + std::to_string(k));
  const std::int64_t h = channels / 2;
  f_kernel_ = Param<T>("f.kernel", kaiming_kernel<T>(Shape{h, h, k, k}, rng));
  f_bias_ = Param<T>("f.bias", BasicTensor<T>(Shape{1, h, 1, 1}));
  g_kernel_ = Param<T>("g.kernel", kaiming_kernel<T>(Shape{h, h, k, k}, rng));
  g_bias_ = Param<T>("g.bias", BasicTensor<T>(Shape{1, h, 1, 1}));
}

template <typename T>
void InvConv<T>::require_shape(const Shape& s, const char* op) const {
  if (s.c != channels()) {
    throw ShapeError(std::string("invconv ") + op + ": expected " + std::to_string(channels()) +
                     " channels, got " + s.str());
  }
}

namespace {

template <typename T>
Shape half_shape(const Shape& s) {
  return Shape{s.bs, s.c / 2, s.h, s.w};
}

}  // namespace

template <typename T>
void InvConv<T>::forward_(BasicTensor<T>& x) const {
  require_shape(x.shape(), "forward");
  BasicTensor<T> tmp(half_shape<T>(x.shape()));
  conv2d_forward_into<T>(x.upper_half(), f_kernel_.value, &f_bias_.value, geometry(), tmp.view());
  add_into<T>(x.lower_half(), tmp.view());
  conv2d_forward_into<T>(x.lower_half(), g_kernel_.value, &g_bias_.value, geometry(), tmp.view());
  add_into<T>(x.upper_half(), tmp.view());
}

template <typename T>
BasicTensor<T> InvConv<T>::forward(const BasicTensor<T>& x) const {
  BasicTensor<T> y = x;
  forward_(y);
  return y;
}

template <typename T>
void InvConv<T>::inverse_(BasicTensor<T>& y) const {
  require_shape(y.shape(), "inverse");
  BasicTensor<T> tmp(half_shape<T>(y.shape()));
  conv2d_forward_into<T>(y.lower_half(), g_kernel_.value, &g_bias_.value, geometry(), tmp.view());
  sub_into<T>(y.upper_half(), tmp.view());
  conv2d_forward_into<T>(y.upper_half(), f_kernel_.value, &f_bias_.value, geometry(), tmp.view());
  sub_into<T>(y.lower_half(), tmp.view());
}

template <typename T>
BasicTensor<T> InvConv<T>::inverse(const BasicTensor<T>& y) const {
  BasicTensor<T> x = y;
  inverse_(x);
  return x;
}

template <typename T>
void InvConv<T>::backward_(ChannelView<const T> x2, ChannelView<const T> y1, BasicTensor<T>& g) {
  require_shape(g.shape(), "backward");
  const auto geo = geometry();
  BasicTensor<T> tmp(half_shape<T>(g.shape()));
  // Through G: y2 = x2 + G(y1).
  conv2d_backward_weight_accumulate<T>(y1, g.upper_half(), geo, g_kernel_.grad, &g_bias_.grad);
  conv2d_backward_input_into<T>(g.upper_half(), g_kernel_.value, geo, tmp.view());
  add_into<T>(g.lower_half(), tmp.view());
  // Through F: y1 = x1 + F(x2).
  conv2d_backward_weight_accumulate<T>(x2, g.lower_half(), geo, f_kernel_.grad, &f_bias_.grad);
  conv2d_backward_input_into<T>(g.lower_half(), f_kernel_.value, geo, tmp.view());
  add_into<T>(g.upper_half(), tmp.view());
}

template <typename T>
BasicTensor<T> InvConv<T>::backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  require_shape(x.shape(), "backward");
  BasicTensor<T> y = forward(x);
  BasicTensor<T> g = grad_out;
  backward_(x.upper_half(), y.lower_half(), g);
  return g;
}

template <typename T>
void InvConv<T>::forward_stored(BasicTensor<T>& a, Stash<T>& stash) const {
  require_shape(a.shape(), "forward");
  stash.push_back(materialize<T>(a.upper_half()));
  BasicTensor<T> tmp(half_shape<T>(a.shape()));
  conv2d_forward_into<T>(a.upper_half(), f_kernel_.value, &f_bias_.value, geometry(), tmp.view());
  add_into<T>(a.lower_half(), tmp.view());
  stash.push_back(materialize<T>(a.lower_half()));
  conv2d_forward_into<T>(a.lower_half(), g_kernel_.value, &g_bias_.value, geometry(), tmp.view());
  add_into<T>(a.upper_half(), tmp.view());
}

template <typename T>
void InvConv<T>::backward_stored(Stash<T>& stash, BasicTensor<T>& g) {
  BasicTensor<T> y1 = pop(stash);
  BasicTensor<T> x2 = pop(stash);
  backward_(x2.view(), y1.view(), g);
}

template <typename T>
void InvConv<T>::invert_backward_(BasicTensor<T>& a, BasicTensor<T>& g) {
  require_shape(a.shape(), "inverse");
  {
    BasicTensor<T> tmp(half_shape<T>(a.shape()));
    conv2d_forward_into<T>(a.lower_half(), g_kernel_.value, &g_bias_.value, geometry(), tmp.view());
    sub_into<T>(a.upper_half(), tmp.view());
  }
  // a now holds (y1, x2): exactly the inputs of G and F.
  backward_(std::as_const(a).upper_half(), std::as_const(a).lower_half(), g);
  BasicTensor<T> tmp(half_shape<T>(a.shape()));
  conv2d_forward_into<T>(a.upper_half(), f_kernel_.value, &f_bias_.value, geometry(), tmp.view());
  sub_into<T>(a.lower_half(), tmp.view());
}

// ---- InvPool -------------------------------------------------------------------

namespace {

// Moves element i to dest(i) along permutation cycles.
template <typename T, typename Dest>
void permute_inplace(T* data, std::int64_t n, Dest dest) {
  std::vector<bool> done(static_cast<std::size_t>(n), false);
  for (std::int64_t start = 0; start < n; ++start) {
    if (done[start]) continue;
    T carry = data[start];
    std::int64_t i = start;
    while (true) {
      const std::int64_t j = dest(i);
      done[j] = true;
      std::swap(carry, data[j]);
      if (j == start) break;
      i = j;
    }
  }
}

}  // namespace

template <typename T>
Shape InvPool<T>::output_shape(const Shape& in) const {
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw ShapeError("invertible pooling needs even spatial extents, got " + in.str());
  }
  if (kind_ == PoolKind::channel) return Shape{in.bs, 4 * in.c, in.h / 2, in.w / 2};
  return Shape{4 * in.bs, in.c, in.h / 2, in.w / 2};
}

template <typename T>
Shape InvPool<T>::input_shape(const Shape& out) const {
  if (kind_ == PoolKind::channel) {
    if (out.c % 4 != 0) throw ShapeError("channel unpooling needs c divisible by 4, got " + out.str());
    return Shape{out.bs, out.c / 4, out.h * 2, out.w * 2};
  }
  if (out.bs % 4 != 0) throw ShapeError("batch unpooling needs bs divisible by 4, got " + out.str());
  return Shape{out.bs / 4, out.c, out.h * 2, out.w * 2};
}

template <typename T>
void InvPool<T>::forward_(BasicTensor<T>& x) const {
  const Shape in = x.shape();
  const Shape out = output_shape(in);
  const std::int64_t h = in.h;
  const std::int64_t w = in.w;
  const std::int64_t oh = out.h;
  const std::int64_t ow = out.w;
  if (kind_ == PoolKind::channel) {
    const std::int64_t c = in.c;
    auto dest = [=](std::int64_t i) {
      const std::int64_t xx = i % w;
      const std::int64_t yy = (i / w) % h;
      const std::int64_t ch = (i / (w * h)) % c;
      const std::int64_t b = i / (w * h * c);
      const std::int64_t q = 2 * (yy % 2) + (xx % 2);
      return ((b * 4 * c + 4 * ch + q) * oh + yy / 2) * ow + xx / 2;
    };
    permute_inplace(x.data(), x.numel(), dest);
  } else {
    const std::int64_t c = in.c;
    auto dest = [=](std::int64_t i) {
      const std::int64_t xx = i % w;
      const std::int64_t yy = (i / w) % h;
      const std::int64_t ch = (i / (w * h)) % c;
      const std::int64_t b = i / (w * h * c);
      const std::int64_t q = 2 * (yy % 2) + (xx % 2);
      return (((4 * b + q) * c + ch) * oh + yy / 2) * ow + xx / 2;
    };
    permute_inplace(x.data(), x.numel(), dest);
  }
  x.reshape(out);
}

template <typename T>
void InvPool<T>::inverse_(BasicTensor<T>& y) const {
  const Shape out = y.shape();
  const Shape in = input_shape(out);
  const std::int64_t w = in.w;
  const std::int64_t oh = out.h;
  const std::int64_t ow = out.w;
  const std::int64_t h = in.h;
  if (kind_ == PoolKind::channel) {
    const std::int64_t oc = out.c;
    auto dest = [=](std::int64_t j) {
      const std::int64_t xo = j % ow;
      const std::int64_t yo = (j / ow) % oh;
      const std::int64_t co = (j / (ow * oh)) % oc;
      const std::int64_t b = j / (ow * oh * oc);
      const std::int64_t q = co % 4;
      const std::int64_t ch = co / 4;
      return ((b * (oc / 4) + ch) * h + 2 * yo + q / 2) * w + 2 * xo + q % 2;
    };
    permute_inplace(y.data(), y.numel(), dest);
  } else {
    const std::int64_t c = out.c;
    auto dest = [=](std::int64_t j) {
      const std::int64_t xo = j % ow;
      const std::int64_t yo = (j / ow) % oh;
      const std::int64_t ch = (j / (ow * oh)) % c;
      const std::int64_t bo = j / (ow * oh * c);
      const std::int64_t q = bo % 4;
      const std::int64_t b = bo / 4;
      return ((b * c + ch) * h + 2 * yo + q / 2) * w + 2 * xo + q % 2;
    };
    permute_inplace(y.data(), y.numel(), dest);
  }
  y.reshape(in);
}

template <typename T>
BasicTensor<T> InvPool<T>::forward(const BasicTensor<T>& x) const {
  BasicTensor<T> y = x;
  forward_(y);
  return y;
}

template <typename T>
BasicTensor<T> InvPool<T>::inverse(const BasicTensor<T>& y) const {
  BasicTensor<T> x = y;
  inverse_(x);
  return x;
}

// ---- MaxPool -------------------------------------------------------------------

template <typename T>
Shape MaxPool<T>::output_shape(const Shape& in) const {
  if (in.h % 2 != 0 || in.w % 2 != 0) throw ShapeError("max pooling needs even extents, got " + in.str());
  return Shape{in.bs, in.c, in.h / 2, in.w / 2};
}

template <typename T>
BasicTensor<T> MaxPool<T>::forward(const BasicTensor<T>& x) const {
  const Shape o = output_shape(x.shape());
  BasicTensor<T> y(o);
  for (std::int64_t b = 0; b < o.bs; ++b)
    for (std::int64_t c = 0; c < o.c; ++c)
      for (std::int64_t i = 0; i < o.h; ++i)
        for (std::int64_t j = 0; j < o.w; ++j) {
          T m = x.at(b, c, 2 * i, 2 * j);
          m = std::max(m, x.at(b, c, 2 * i, 2 * j + 1));
          m = std::max(m, x.at(b, c, 2 * i + 1, 2 * j));
          m = std::max(m, x.at(b, c, 2 * i + 1, 2 * j + 1));
          y.at(b, c, i, j) = m;
        }
  return y;
}

template <typename T>
BasicTensor<T> MaxPool<T>::backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) const {
  const Shape o = output_shape(x.shape());
  if (!(grad_out.shape() == o)) throw ShapeError("max pool backward: bad gradient " + grad_out.shape().str());
  BasicTensor<T> gx(x.shape());
  for (std::int64_t b = 0; b < o.bs; ++b)
    for (std::int64_t c = 0; c < o.c; ++c)
      for (std::int64_t i = 0; i < o.h; ++i)
        for (std::int64_t j = 0; j < o.w; ++j) {
          std::int64_t by = 2 * i;
          std::int64_t bx = 2 * j;
          for (int q = 1; q < 4; ++q) {
            const std::int64_t yy = 2 * i + q / 2;
            const std::int64_t xx = 2 * j + q % 2;
            if (x.at(b, c, yy, xx) > x.at(b, c, by, bx)) {
              by = yy;
              bx = xx;
            }
          }
          gx.at(b, c, by, bx) = grad_out.at(b, c, i, j);
        }
  return gx;
}

template <typename T>
void MaxPool<T>::forward_stored(BasicTensor<T>& a, Stash<T>& stash) const {
  stash.push_back(std::move(a));
  a = forward(stash.back());
}

template <typename T>
void MaxPool<T>::backward_stored(Stash<T>& stash, BasicTensor<T>& g) const {
  BasicTensor<T> x = pop(stash);
  g = backward(x, g);
}

// ---- ClassifierHead ------------------------------------------------------------

template <typename T>
ClassifierHead<T>::ClassifierHead(std::int64_t channels, std::int64_t num_classes,
                                  std::int64_t group_size, Pcg32& rng)
    : group_size_(group_size) {
  if (channels < 1 || num_classes < 2 || group_size < 1) {
    throw ConfigError("head: need channels >= 1, classes >= 2, group_size >= 1");
  }
  weight_ = Param<T>("weight", BasicTensor<T>(Shape{num_classes, channels, 1, 1}));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  for (T& v : weight_.value.values()) v = static_cast<T>(stddev * rng.normal());
  bias_ = Param<T>("bias", BasicTensor<T>(Shape{1, num_classes, 1, 1}));
}

template <typename T>
void ClassifierHead<T>::require_input(const Shape& s) const {
  if (s.c != channels() || s.bs % group_size_ != 0) {
    throw ShapeError("head: input " + s.str() + " incompatible with " + std::to_string(channels()) +
                     " channels and group size " + std::to_string(group_size_));
  }
}

template <typename T>
BasicTensor<T> ClassifierHead<T>::forward(const BasicTensor<T>& x) const {
  require_input(x.shape());
  const Shape& s = x.shape();
  const std::int64_t nb = s.bs / group_size_;
  const std::int64_t k = num_classes();
  const double inv = 1.0 / static_cast<double>(group_size_ * s.plane());
  std::vector<double> feat(static_cast<std::size_t>(s.c));
  BasicTensor<T> logits(Shape{nb, k, 1, 1});
  for (std::int64_t b = 0; b < nb; ++b) {
    std::fill(feat.begin(), feat.end(), 0.0);
    for (std::int64_t v = 0; v < group_size_; ++v) {
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T* p = x.view().plane(b * group_size_ + v, c);
        double acc = 0.0;
        for (std::int64_t i = 0; i < s.plane(); ++i) acc += p[i];
        feat[c] += acc;
      }
    }
    for (std::int64_t j = 0; j < k; ++j) {
      double z = bias_.value.data()[j];
      const T* wrow = weight_.value.data() + j * s.c;
      for (std::int64_t c = 0; c < s.c; ++c) z += wrow[c] * feat[c] * inv;
      logits.data()[b * k + j] = static_cast<T>(z);
    }
  }
  return logits;
}

template <typename T>
BasicTensor<T> ClassifierHead<T>::backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_logits) {
  require_input(x.shape());
  const Shape& s = x.shape();
  const std::int64_t nb = s.bs / group_size_;
  const std::int64_t k = num_classes();
  if (!(grad_logits.shape() == Shape{nb, k, 1, 1})) {
    throw ShapeError("head backward: bad gradient " + grad_logits.shape().str());
  }
  const double inv = 1.0 / static_cast<double>(group_size_ * s.plane());
  std::vector<double> feat(static_cast<std::size_t>(s.c));
  BasicTensor<T> gx(s);
  for (std::int64_t b = 0; b < nb; ++b) {
    std::fill(feat.begin(), feat.end(), 0.0);
    for (std::int64_t v = 0; v < group_size_; ++v)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T* p = x.view().plane(b * group_size_ + v, c);
        double acc = 0.0;
        for (std::int64_t i = 0; i < s.plane(); ++i) acc += p[i];
        feat[c] += acc * inv;
      }
    const T* gl = grad_logits.data() + b * k;
    for (std::int64_t j = 0; j < k; ++j) {
      bias_.grad.data()[j] += gl[j];
      T* gw = weight_.grad.data() + j * s.c;
      for (std::int64_t c = 0; c < s.c; ++c) gw[c] += static_cast<T>(gl[j] * feat[c]);
    }
    for (std::int64_t c = 0; c < s.c; ++c) {
      double gf = 0.0;
      for (std::int64_t j = 0; j < k; ++j) gf += static_cast<double>(gl[j]) * weight_.value.data()[j * s.c + c];
      const T val = static_cast<T>(gf * inv);
      for (std::int64_t v = 0; v < group_size_; ++v) {
        T* p = gx.view().plane(b * group_size_ + v, c);
        std::fill(p, p + s.plane(), val);
      }
    }
  }
  return gx;
}

template <typename T>
LossResult softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                                 BasicTensor<T>* grad) {
  const std::int64_t nb = logits.shape().bs;
  const std::int64_t k = logits.shape().c;
  if (static_cast<std::int64_t>(labels.size()) != nb) {
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(nb));
  }
  if (grad != nullptr && !(grad->shape() == logits.shape())) *grad = BasicTensor<T>(logits.shape());
  LossResult r;
  std::vector<double> p(static_cast<std::size_t>(k));
  for (std::int64_t b = 0; b < nb; ++b) {
    const T* z = logits.data() + b * k;
    const int y = labels[b];
    if (y < 0 || y >= k) throw DomainError("cross entropy: label " + std::to_string(y) + " out of range");
    double zmax = z[0];
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < k; ++j)
      if (z[j] > zmax) {
        zmax = z[j];
        arg = j;
      }
    double sum = 0.0;
    for (std::int64_t j = 0; j < k; ++j) sum += (p[j] = std::exp(static_cast<double>(z[j]) - zmax));
    r.loss += std::log(sum) - (static_cast<double>(z[y]) - zmax);
    if (arg == y) ++r.correct;
    if (grad != nullptr) {
      T* g = grad->data() + b * k;
      for (std::int64_t j = 0; j < k; ++j)
        g[j] = static_cast<T>((p[j] / sum - (j == y ? 1.0 : 0.0)) / static_cast<double>(nb));
    }
  }
  r.loss /= static_cast<double>(nb);
  return r;
}

#define REVTRAIN_INSTANTIATE_LAYERS(T)                                                     \
  template BasicTensor<T> pop(Stash<T>&);                                                 \
  template BasicTensor<T> kaiming_kernel<T>(const Shape&, Pcg32&);                        \
  template class Conv<T>;                                                                 \
  template class InvBatchNorm<T>;                                                         \
  template class InvLeakyReLU<T>;                                                         \
  template class InvConv<T>;                                                              \
  template class InvPool<T>;                                                              \
  template class MaxPool<T>;                                                              \
  template class ClassifierHead<T>;                                                       \
  template LossResult softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>, \
                                            BasicTensor<T>*);

REVTRAIN_INSTANTIATE_LAYERS(float)
REVTRAIN_INSTANTIATE_LAYERS(double)

}  // namespace revtrain
