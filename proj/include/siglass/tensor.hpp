#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "siglass/error.hpp"

namespace siglass {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

/// Row-major strides for `shape`.
inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor over an element type. `Tensor` (doubles) carries
/// concrete values; the affine engine instantiates it over affine pairs.
template <class T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;

  BasicTensor() = default;
  explicit BasicTensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape))) {}
  BasicTensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
      throw Error(ErrorKind::ShapeMismatch, "tensor data length " + std::to_string(data.size()) +
                                                " does not match shape " + shape_string(shape));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::int64_t dim(std::size_t axis) const { return shape.at(axis); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;
};

using Tensor = BasicTensor<double>;

template <class U, class T, class F>
BasicTensor<U> map_tensor(const BasicTensor<T>& t, F&& f) {
  BasicTensor<U> out;
  out.shape = t.shape;
  out.data.reserve(t.data.size());
  for (const auto& v : t.data) out.data.push_back(f(v));
  return out;
}

}  // namespace siglass
