#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdunet {

/// Raised when operand shapes violate an op's preconditions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents of a rank-4 (N, C, H, W) tensor.
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  [[nodiscard]] constexpr std::int64_t numel() const { return n * c * h * w; }
  [[nodiscard]] constexpr std::int64_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense N,C,H,W array in row-major order with an optional gradient slot.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative tensor extent " + shape.str());
    }
    values_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }
  BasicTensor(Shape shape, std::vector<T> values) : shape_(shape), values_(std::move(values)) {
    if (static_cast<std::int64_t>(values_.size()) != shape.numel()) {
      throw ShapeError("value count " + std::to_string(values_.size()) + " does not match shape " +
                       shape.str());
    }
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }

  [[nodiscard]] std::span<T> values() { return values_; }
  [[nodiscard]] std::span<const T> values() const { return values_; }
  [[nodiscard]] T* data() { return values_.data(); }
  [[nodiscard]] const T* data() const { return values_.data(); }

  [[nodiscard]] std::size_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + h) * shape_.w + w);
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) { return values_[index(n, c, h, w)]; }
  [[nodiscard]] T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return values_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return values_[i]; }
  T operator[](std::size_t i) const { return values_[i]; }

  [[nodiscard]] bool has_grad() const { return grad_.has_value(); }
  /// Gradient storage, allocated (zeroed) on first access.
  std::span<T> grad() {
    if (!grad_) grad_.emplace(values_.size(), T{0});
    return *grad_;
  }
  [[nodiscard]] std::span<const T> grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T{0});
  }
  void drop_grad() { grad_.reset(); }

  [[nodiscard]] bool all_finite() const {
    for (T v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Element-wise converted copy (gradient not carried).
  template <typename U>
  [[nodiscard]] BasicTensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_{};
  std::vector<T> values_;
  std::optional<std::vector<T>> grad_;
};

using Tensor = BasicTensor<float>;

/// A learnable tensor with a per-element freeze mask. Frozen elements are never
/// touched by the optimizer.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<std::uint8_t> frozen_mask;
  /// Logical rank: 4 for conv kernels, 1 for per-channel vectors stored as (C,1,1,1).
  int rank = 4;

  Parameter() = default;
  Parameter(std::string name_, Tensor t, int rank_)
      : name(std::move(name_)), tensor(std::move(t)), frozen_mask(tensor.size(), 0), rank(rank_) {}

  [[nodiscard]] std::size_t size() const { return tensor.size(); }
  [[nodiscard]] std::vector<std::uint64_t> dims() const {
    const Shape& s = tensor.shape();
    if (rank == 1) return {static_cast<std::uint64_t>(s.n)};
    return {static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c), static_cast<std::uint64_t>(s.h),
            static_cast<std::uint64_t>(s.w)};
  }
  [[nodiscard]] std::size_t frozen_count() const {
    std::size_t k = 0;
    for (auto m : frozen_mask) k += m != 0;
    return k;
  }
};

struct ConvSpec {
  std::int64_t out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool has_bias = true;

  static ConvSpec conv3x3(std::int64_t out, bool bias = true) { return {out, 3, 1, 1, bias}; }
  static ConvSpec conv1x1(std::int64_t out, bool bias = true) { return {out, 1, 1, 0, bias}; }

  /// Throws ShapeError unless kernel 3 uses pad 1 / stride 1, or kernel 1 uses pad 0.
  void validate() const {
    if (out_channels <= 0) throw ShapeError("conv out_channels must be positive");
    if (kernel == 3) {
      if (padding != 1 || stride != 1) throw ShapeError("3x3 conv requires padding 1 and stride 1");
    } else if (kernel == 1) {
      if (padding != 0) throw ShapeError("1x1 conv requires padding 0");
      if (stride != 1 && stride != 2) throw ShapeError("conv stride must be 1 or 2");
    } else {
      throw ShapeError("conv kernel must be 1 or 3");
    }
  }
};

enum class Mode { Train, Infer };

}  // namespace mdunet
