#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace sedx {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles, rank 0 to 4.
///
/// A rank-0 array (empty shape) holds one element and is what reductions
/// over all axes return.
class DenseArray {
 public:
  DenseArray() : data_(1, 0.0) {}
  explicit DenseArray(Shape shape, double fill = 0.0);
  DenseArray(Shape shape, std::vector<double> data);

  static DenseArray scalar(double v);
  static DenseArray vector(std::initializer_list<double> values);
  static DenseArray matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Scalar value of a one-element array.
  double item() const;
  bool all_finite() const;
  void fill(double v);

  /// Same data, new shape of equal size.
  DenseArray reshaped(Shape shape) const;

  bool operator==(const DenseArray& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws DimensionError naming both shapes unless a and b agree exactly.
void require_same_shape(const DenseArray& a, const DenseArray& b, const char* op);

}  // namespace sedx
