#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ebmssl {

// Dense row-major array of doubles. Rank 0 is a scalar; rank 1 of length n
// is treated as a 1 x n row wherever a matrix view is needed.
class RealArray {
 public:
  RealArray() = default;
  explicit RealArray(std::vector<std::size_t> shape, double fill = 0.0);
  RealArray(std::vector<std::size_t> shape, std::vector<double> data);

  static RealArray scalar(double v);
  static RealArray row(std::vector<double> v);
  static RealArray matrix(std::size_t rows, std::size_t cols,
                          std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<const double> row_view(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row_view(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }

  double item() const;
  bool all_finite() const;
  void fill(double v);

  bool same_shape(const RealArray& o) const { return shape_ == o.shape_; }
  std::string shape_string() const;

  friend bool operator==(const RealArray&, const RealArray&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Overflow-safe log(sum(exp(v))). Returns -inf for an empty span.
double log_sum_exp(std::span<const double> v);
std::vector<double> softmax(std::span<const double> v);

}  // namespace ebmssl
