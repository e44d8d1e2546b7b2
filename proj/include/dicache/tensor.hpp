#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dicache/error.hpp"

namespace dicache {

// Dense row-major float32 matrix: rows are tokens, cols are channels.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                " != " + std::to_string(rows_) + "x" +
                                                std::to_string(cols_));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> flat() noexcept { return data_; }
  std::span<const float> flat() const noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool same_shape(const Tensor2D& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  // Bitwise equality of shape and contents (distinguishes -0 from +0).
  friend bool bit_equal(const Tensor2D& a, const Tensor2D& b) noexcept {
    if (!a.same_shape(b)) return false;
    return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](float x, float y) {
      return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
    });
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* where) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(where) + ": " + a.shape_string() + " vs " + b.shape_string());
  }
}

inline void require_finite(const Tensor2D& t, const char* where) {
  if (!t.all_finite()) {
    throw Error(ErrorKind::NonFinite, std::string(where) + ": tensor has NaN/Inf entries");
  }
}

inline Tensor2D operator-(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "subtract");
  Tensor2D out(a.rows(), a.cols());
  auto o = out.flat();
  auto x = a.flat();
  auto y = b.flat();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  return out;
}

inline Tensor2D operator+(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "add");
  Tensor2D out(a.rows(), a.cols());
  auto o = out.flat();
  auto x = a.flat();
  auto y = b.flat();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return out;
}

}  // namespace dicache
