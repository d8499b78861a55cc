#include "revtrain/ops.hpp"

#include <cmath>
#include <algorithm>
#include <cstring>
#include <limits>
#include <type_traits>

#include "revtrain/errors.hpp"
#include "revtrain/rng.hpp"

namespace revtrain {

namespace {

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

template <typename T, typename Fn>
BasicTensor<T> zip(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op, Fn fn) {
  require_same(a.shape(), b.shape(), op);
  BasicTensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = fn(pa[i], pb[i]);
  return out;
}

template <typename T, typename Fn>
void for_each_plane(ChannelView<T> dst, ChannelView<const T> src, const char* op, Fn fn) {
  require_same(dst.shape, src.shape, op);
  const std::int64_t n = dst.shape.sample();
  for (std::int64_t b = 0; b < dst.shape.bs; ++b) {
    T* d = dst.sample(b);
    const T* s = src.sample(b);
    for (std::int64_t i = 0; i < n; ++i) fn(d[i], s[i]);
  }
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  BasicTensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * factor;
  return out;
}

template <typename T>
void add_into(ChannelView<T> dst, ChannelView<const T> src) {
  for_each_plane(dst, src, "add_into", [](T& d, T s) { d += s; });
}

template <typename T>
void sub_into(ChannelView<T> dst, ChannelView<const T> src) {
  for_each_plane(dst, src, "sub_into", [](T& d, T s) { d -= s; });
}

template <typename T>
void copy_into(ChannelView<T> dst, ChannelView<const T> src) {
  require_same(dst.shape, src.shape, "copy_into");
  const std::int64_t n = dst.shape.sample();
  for (std::int64_t b = 0; b < dst.shape.bs; ++b) {
    std::memcpy(dst.sample(b), src.sample(b), static_cast<std::size_t>(n) * sizeof(T));
  }
}

template <typename T>
void difference_into(ChannelView<T> dst, ChannelView<const T> a, ChannelView<const T> b) {
  require_same(dst.shape, a.shape, "difference_into");
  require_same(a.shape, b.shape, "difference_into");
  const std::int64_t n = dst.shape.sample();
  for (std::int64_t s = 0; s < dst.shape.bs; ++s) {
    T* d = dst.sample(s);
    const T* pa = a.sample(s);
    const T* pb = b.sample(s);
    for (std::int64_t i = 0; i < n; ++i) d[i] = pa[i] - pb[i];
  }
}

template <typename T>
void fill(ChannelView<T> dst, T value) {
  const std::int64_t n = dst.shape.sample();
  for (std::int64_t b = 0; b < dst.shape.bs; ++b) {
    T* d = dst.sample(b);
    for (std::int64_t i = 0; i < n; ++i) d[i] = value;
  }
}

template <typename T>
double sum_sq_norm(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
double sum_sq_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a.shape(), b.shape(), "sum_sq_diff");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  return acc;
}

template <typename T>
double relative_l2_error(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const double num = std::sqrt(sum_sq_diff(a, b));
  const double den = std::sqrt(sum_sq_norm(b));
  return den > 0.0 ? num / den : num;
}

template <typename T>
double snr(const BasicTensor<T>& reconstructed, const BasicTensor<T>& reference) {
  const double noise = sum_sq_diff(reconstructed, reference);
  const double signal = sum_sq_norm(reference);
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return signal / noise;
}

template <typename T>
ChannelStats channel_mean_var(ChannelView<const T> x) {
  const std::int64_t c = x.shape.c;
  const std::int64_t plane = x.shape.plane();
  const double count = static_cast<double>(x.shape.bs * plane);
  ChannelStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::int64_t b = 0; b < x.shape.bs; ++b) {
      const T* p = x.plane(b, ch);
      for (std::int64_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::int64_t b = 0; b < x.shape.bs; ++b) {
      const T* p = x.plane(b, ch);
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        sq += d * d;
      }
    }
    stats.mean[ch] = mean;
    stats.var[ch] = sq / count;
  }
  return stats;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& x, std::int64_t at) {
  if (at <= 0 || at >= x.shape().c) {
    throw ShapeError("split_channels: split index " + std::to_string(at) + " outside (0, " +
                     std::to_string(x.shape().c) + ")");
  }
  return {materialize(x.channels(0, at)), materialize(x.channels(at, x.shape().c - at))};
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.bs != sb.bs || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: incompatible " + sa.str() + " and " + sb.str());
  }
  BasicTensor<T> out(Shape{sa.bs, sa.c + sb.c, sa.h, sa.w});
  copy_into(out.channels(0, sa.c), a.view());
  copy_into(out.channels(sa.c, sb.c), b.view());
  return out;
}

template <typename T>
BasicTensor<T> gaussian(const Shape& shape, double mean, double stddev, std::uint64_t seed) {
  BasicTensor<T> out(shape);
  Pcg32 rng(seed, 0);
  for (T& v : out.values()) v = static_cast<T>(mean + stddev * rng.normal());
  return out;
}

template <typename T>
GradientAgreement compare_gradients(const std::vector<BasicTensor<T>>& a,
                                    const std::vector<BasicTensor<T>>& b, double floor) {
  if (a.size() != b.size()) throw ShapeError("compare_gradients: tensor count mismatch");
  double total = 0.0;
  for (const auto& t : b) total += sum_sq_norm(t);
  if (floor < 0.0) floor = std::is_same_v<T, float> ? 1e-3 : 1e-6;
  const double min_den = floor * std::sqrt(total);
  GradientAgreement r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max(std::sqrt(sum_sq_norm(b[i])), min_den);
    const double num = std::sqrt(sum_sq_diff(a[i], b[i]));
    const double rel = den > 0.0 ? num / den : num;
    if (rel > r.worst || i == 0) {
      r.worst = rel;
      r.worst_index = i;
    }
  }
  return r;
}

#define REVTRAIN_INSTANTIATE_OPS(T)                                                           \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                   \
  template void add_into(ChannelView<T>, ChannelView<const T>);                              \
  template void sub_into(ChannelView<T>, ChannelView<const T>);                              \
  template void copy_into(ChannelView<T>, ChannelView<const T>);                             \
  template void difference_into(ChannelView<T>, ChannelView<const T>, ChannelView<const T>); \
  template void fill(ChannelView<T>, T);                                                     \
  template double sum_sq_norm(const BasicTensor<T>&);                                        \
  template double sum_sq_diff(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template double relative_l2_error(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template double snr(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template ChannelStats channel_mean_var(ChannelView<const T>);                              \
  template std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>&,   \
                                                                    std::int64_t);           \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> gaussian(const Shape&, double, double, std::uint64_t);               \
  template GradientAgreement compare_gradients(const std::vector<BasicTensor<T>>&,           \
                                               const std::vector<BasicTensor<T>>&, double);

REVTRAIN_INSTANTIATE_OPS(float)
REVTRAIN_INSTANTIATE_OPS(double)

}  // namespace revtrain
