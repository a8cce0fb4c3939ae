// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cwac/error.hpp"

namespace cwac {

using Shape = std::vector<std::size_t>;

enum class ElemKind { f32, u8, i32 };

std::string_view to_string(ElemKind kind);
ElemKind elem_kind_from_string(std::string_view name);
std::size_t elem_size(ElemKind kind);

template <typename T>
struct ElemKindOf;
template <>
struct ElemKindOf<float> {
  static constexpr ElemKind value = ElemKind::f32;
};
template <>
struct ElemKindOf<std::uint8_t> {
  static constexpr ElemKind value = ElemKind::u8;
};
template <>
struct ElemKindOf<std::int32_t> {
  static constexpr ElemKind value = ElemKind::i32;
};

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

/// Dense row-major array. The element kind is part of the type, so
/// conversions between kinds are always explicit.
template <typename T>
class Tensor {
 public:
  static constexpr ElemKind kind = ElemKindOf<T>::value;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T{}) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " holds " +
                       std::to_string(shape_numel(shape_)) +
                       " elements, got " + std::to_string(data_.size()));
    }
  }

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T> &values() const { return data_; }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  // rank-2 helpers
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }
  T &at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T &at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  std::span<T> row(std::size_t r) {
    const std::size_t w = size() / shape_.at(0);
    return std::span<T>(data_).subspan(r * w, w);
  }
  std::span<const T> row(std::size_t r) const {
    const std::size_t w = size() / shape_.at(0);
    return std::span<const T>(data_).subspan(r * w, w);
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor &) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorU8 = Tensor<std::uint8_t>;
using TensorI32 = Tensor<std::int32_t>;

/// Stacks rows [begin, end) of a batch tensor (leading dim is the batch).
template <typename T>
Tensor<T> slice_rows(const Tensor<T> &t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin > end || end > t.dim(0)) {
    throw ShapeError("row slice out of range");
  }
  const std::size_t w = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = end - begin;
  auto first = t.values().begin() + static_cast<std::ptrdiff_t>(begin * w);
  return Tensor<T>(std::move(s),
                   std::vector<T>(first, first + static_cast<std::ptrdiff_t>(
                                                     (end - begin) * w)));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T> &t, std::span<const std::size_t> idx) {
  const std::size_t w = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = idx.size();
  std::vector<T> out;
  out.reserve(idx.size() * w);
  for (std::size_t r : idx) {
    if (r >= t.dim(0)) throw ShapeError("row index out of range");
    auto row = t.row(r);
    out.insert(out.end(), row.begin(), row.end());
  }
  return Tensor<T>(std::move(s), std::move(out));
}

}  // namespace cwac
