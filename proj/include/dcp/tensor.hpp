#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dcp {

enum class DType { Float32, Float64 };

/// Dense rank-4 array (batch, channels, height, width) in row-major order.
///
/// Storage is always double precision; the dtype tag records the precision a
/// tensor was loaded from so file formats can round-trip it.
class Tensor {
 public:
  using Shape = std::array<std::size_t, 4>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, DType dtype = DType::Float64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::Float64);

  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  DType dtype() const { return dtype_; }

  /// Number of elements in one batch entry (channels * height * width).
  std::size_t sample_size() const { return shape_[1] * shape_[2] * shape_[3]; }
  std::size_t plane_size() const { return shape_[2] * shape_[3]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Value of a single-element tensor.
  double item() const;

  bool all_finite() const;
  void fill(double value);

  /// Copies batch entries [begin, begin + count) into a new tensor.
  Tensor slice_batch(std::size_t begin, std::size_t count) const;
  /// Gathers the listed batch entries, in order.
  Tensor gather_batch(std::span<const std::size_t> indices) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
  DType dtype_ = DType::Float64;
};

std::string shape_string(const Tensor::Shape& shape);

/// Throws NumericError naming `what` when the tensor holds NaN or Inf.
void require_finite(const Tensor& t, const char* what);

/// Copies `src` batch entries into `dst` starting at batch index `offset`.
void write_batch(Tensor& dst, std::size_t offset, const Tensor& src);

}  // namespace dcp
