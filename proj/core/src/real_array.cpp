#include "ebmssl/real_array.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ebmssl/error.hpp"

namespace ebmssl {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

RealArray::RealArray(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

RealArray::RealArray(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
}

RealArray RealArray::scalar(double v) { return RealArray({}, std::vector<double>{v}); }

RealArray RealArray::row(std::vector<double> v) {
  const std::size_t n = v.size();
  return RealArray({n}, std::move(v));
}

RealArray RealArray::matrix(std::size_t rows, std::size_t cols,
                            std::initializer_list<double> values) {
  return RealArray({rows, cols}, std::vector<double>(values));
}

std::size_t RealArray::rows() const {
  if (shape_.size() < 2) return 1;
  return data_.size() / shape_.back();
}

std::size_t RealArray::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

double RealArray::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar array " + shape_string());
  return data_[0];
}

bool RealArray::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void RealArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string RealArray::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    s += out[i];
  }
  for (auto& x : out) x /= s;
  return out;
}

}  // namespace ebmssl
