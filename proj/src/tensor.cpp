#include "revtrain/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <limits>

#include "revtrain/errors.hpp"

namespace revtrain {

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

std::string Shape::str() const {
  return "(" + std::to_string(bs) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
         std::to_string(w) + ")";
}

Shape checked_shape(std::int64_t bs, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (bs < 1 || c < 1 || h < 1 || w < 1) {
    throw ShapeError("tensor extents must be >= 1, got " + Shape{bs, c, h, w}.str());
  }
  constexpr auto limit = std::numeric_limits<std::int64_t>::max() / 8;
  if (bs > limit / c || bs * c > limit / h || bs * c * h > limit / w) {
    throw ShapeError("tensor element count overflows: " + Shape{bs, c, h, w}.str());
  }
  return {bs, c, h, w};
}

template <typename T>
BasicTensor<T>::BasicTensor(const Shape& shape)
    : shape_(checked_shape(shape.bs, shape.c, shape.h, shape.w)),
      data_(static_cast<std::size_t>(shape.numel()), T{0}) {}

template <typename T>
BasicTensor<T>::BasicTensor(const Shape& shape, T fill)
    : shape_(checked_shape(shape.bs, shape.c, shape.h, shape.w)),
      data_(static_cast<std::size_t>(shape.numel()), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(const Shape& shape, std::span<const T> values)
    : shape_(checked_shape(shape.bs, shape.c, shape.h, shape.w)) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape.str());
  }
  data_.assign(values.begin(), values.end());
}

template <typename T>
ChannelView<T> BasicTensor<T>::channels(std::int64_t first, std::int64_t count) {
  if (first < 0 || count < 1 || first + count > shape_.c) {
    throw ShapeError("channel range [" + std::to_string(first) + ", " +
                     std::to_string(first + count) + ") outside " + shape_.str());
  }
  Shape s = shape_;
  s.c = count;
  return {data() + first * shape_.plane(), s, shape_.sample()};
}

template <typename T>
ChannelView<const T> BasicTensor<T>::channels(std::int64_t first, std::int64_t count) const {
  return const_cast<BasicTensor<T>*>(this)->channels(first, count);
}

template <typename T>
void BasicTensor<T>::reshape(const Shape& shape) {
  if (shape.numel() != numel()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  shape_ = checked_shape(shape.bs, shape.c, shape.h, shape.w);
}

template <typename T>
void BasicTensor<T>::release() {
  Storage().swap(data_);
  shape_ = Shape{0, 0, 0, 0};
}

template <typename T>
BasicTensor<T> materialize(ChannelView<const T> view) {
  BasicTensor<T> out(view.shape);
  const std::int64_t n = view.shape.sample();
  for (std::int64_t b = 0; b < view.shape.bs; ++b) {
    std::memcpy(out.data() + b * n, view.sample(b), static_cast<std::size_t>(n) * sizeof(T));
  }
  return out;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template Tensor materialize(ChannelView<const float>);
template TensorD materialize(ChannelView<const double>);

}  // namespace revtrain
