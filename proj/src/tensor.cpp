#include "dcp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dcp/errors.hpp"

namespace dcp {

namespace {

std::size_t element_count(const Tensor::Shape& shape) {
  return shape[0] * shape[1] * shape[2] * shape[3];
}

}  // namespace

Tensor::Tensor(Shape shape, double fill, DType dtype)
    : shape_(shape), data_(element_count(shape), fill), dtype_(dtype) {}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(shape), data_(std::move(data)), dtype_(dtype) {
  if (data_.size() != element_count(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1, 1, 1}, value); }

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::slice_batch(std::size_t begin, std::size_t count) const {
  if (begin + count > shape_[0]) {
    throw DimensionError("batch slice out of range for shape " + shape_string(shape_));
  }
  const std::size_t stride = sample_size();
  Tensor out({count, shape_[1], shape_[2], shape_[3]}, 0.0, dtype_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride), count * stride,
              out.data_.begin());
  return out;
}

Tensor Tensor::gather_batch(std::span<const std::size_t> indices) const {
  const std::size_t stride = sample_size();
  Tensor out({indices.size(), shape_[1], shape_[2], shape_[3]}, 0.0, dtype_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= shape_[0]) {
      throw DimensionError("batch index out of range for shape " + shape_string(shape_));
    }
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

std::string shape_string(const Tensor::Shape& shape) {
  std::ostringstream os;
  os << '[' << shape[0] << ',' << shape[1] << ',' << shape[2] << ',' << shape[3] << ']';
  return os.str();
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite values in ") + what);
  }
}

void write_batch(Tensor& dst, std::size_t offset, const Tensor& src) {
  if (src.dim(1) != dst.dim(1) || src.dim(2) != dst.dim(2) || src.dim(3) != dst.dim(3) ||
      offset + src.dim(0) > dst.dim(0)) {
    throw DimensionError("cannot write " + shape_string(src.shape()) + " into " +
                         shape_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(),
            dst.data().begin() + static_cast<std::ptrdiff_t>(offset * dst.sample_size()));
}

}  // namespace dcp
