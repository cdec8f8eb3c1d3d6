#include "sedx/ndarray.hpp"

#include <cmath>
#include <numeric>

#include "sedx/errors.hpp"

namespace sedx {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

DenseArray::DenseArray(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  if (shape_.size() > 4) throw DimensionError("arrays above rank 4 are not supported");
}

DenseArray::DenseArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 4) throw DimensionError("arrays above rank 4 are not supported");
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

DenseArray DenseArray::scalar(double v) { return DenseArray(Shape{}, std::vector<double>{v}); }

DenseArray DenseArray::vector(std::initializer_list<double> values) {
  return DenseArray(Shape{values.size()}, std::vector<double>(values));
}

DenseArray DenseArray::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& r : rows) {
    if (r.size() != m) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return DenseArray(Shape{n, m}, std::move(data));
}

std::size_t DenseArray::rows() const {
  if (rank() != 2) throw DimensionError("rows() on non-matrix " + shape_string(shape_));
  return shape_[0];
}

std::size_t DenseArray::cols() const {
  if (rank() != 2) throw DimensionError("cols() on non-matrix " + shape_string(shape_));
  return shape_[1];
}

double DenseArray::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on array of shape " + shape_string(shape_));
  }
  return data_[0];
}

bool DenseArray::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void DenseArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

DenseArray DenseArray::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return DenseArray(std::move(shape), data_);
}

void require_same_shape(const DenseArray& a, const DenseArray& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace sedx
