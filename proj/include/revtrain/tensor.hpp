#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "revtrain/allocator.hpp"

namespace revtrain {

enum class DType { f32, f64 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

constexpr int bytes_per_element(DType d) { return d == DType::f32 ? 4 : 8; }
const char* dtype_name(DType d);

// Extents of a (bs, c, h, w) tensor; all four are >= 1 once validated.
struct Shape {
  std::int64_t bs = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t numel() const { return bs * c * h * w; }
  std::int64_t plane() const { return h * w; }
  std::int64_t sample() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Throws ShapeError unless all extents are >= 1 and the element count does not
// overflow.
Shape checked_shape(std::int64_t bs, std::int64_t c, std::int64_t h, std::int64_t w);

// A contiguous range of channels inside a (bs, c, h, w) buffer. Planes inside
// one sample are contiguous; consecutive samples are batch_stride apart.
template <typename T>
struct ChannelView {
  T* data = nullptr;
  Shape shape;
  std::int64_t batch_stride = 0;

  T* sample(std::int64_t b) const { return data + b * batch_stride; }
  T* plane(std::int64_t b, std::int64_t c) const { return sample(b) + c * shape.plane(); }

  operator ChannelView<const T>() const { return {data, shape, batch_stride}; }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, CountingAllocator<T>>;

  BasicTensor() = default;
  explicit BasicTensor(const Shape& shape);
  BasicTensor(const Shape& shape, T fill);
  BasicTensor(const Shape& shape, std::span<const T> values);

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t bytes() const { return numel() * static_cast<std::int64_t>(sizeof(T)); }
  bool empty() const { return data_.empty(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }

  T& at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) {
    return data_[static_cast<std::size_t>(((b * shape_.c + c) * shape_.h + y) * shape_.w + x)];
  }
  const T& at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data_[static_cast<std::size_t>(((b * shape_.c + c) * shape_.h + y) * shape_.w + x)];
  }

  ChannelView<T> view() { return {data(), shape_, shape_.sample()}; }
  ChannelView<const T> view() const { return {data(), shape_, shape_.sample()}; }
  ChannelView<T> channels(std::int64_t first, std::int64_t count);
  ChannelView<const T> channels(std::int64_t first, std::int64_t count) const;
  // First / second half of the channels (coupling partitions).
  ChannelView<T> lower_half() { return channels(0, shape_.c / 2); }
  ChannelView<T> upper_half() { return channels(shape_.c / 2, shape_.c / 2); }
  ChannelView<const T> lower_half() const { return channels(0, shape_.c / 2); }
  ChannelView<const T> upper_half() const { return channels(shape_.c / 2, shape_.c / 2); }

  // Reinterpret extents without moving data; the element count must match.
  void reshape(const Shape& shape);
  // Drop the buffer (and its byte count) immediately.
  void release();

 private:
  Shape shape_{0, 0, 0, 0};
  Storage data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Copy the channels of a view into a standalone tensor.
template <typename T>
BasicTensor<T> materialize(ChannelView<const T> view);

template <typename T, typename U>
BasicTensor<T> cast(const BasicTensor<U>& x) {
  BasicTensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = static_cast<T>(x.data()[i]);
  return out;
}

}  // namespace revtrain
