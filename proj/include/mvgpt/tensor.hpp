#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvgpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. Copies share storage; use clone() for a
// deep copy. All forward math in this project runs at 64-bit precision.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw std::invalid_argument("tensor: zero dimension in " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) {
    Tensor t(Shape{1});
    (*t.data_)[0] = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<double> data() { return {data_->data(), data_->size()}; }
  std::span<const double> data() const { return {data_->data(), data_->size()}; }

  double& at(std::size_t i) { return (*data_)[i]; }
  double at(std::size_t i) const { return (*data_)[i]; }

  // rank-2 convenience access
  double& operator()(std::size_t r, std::size_t c) { return (*data_)[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }

  double item() const {
    if (size() != 1) throw std::logic_error("item(): tensor " + shape_str(shape_) + " is not scalar");
    return (*data_)[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool shares_storage(const Tensor& o) const { return data_ == o.data_; }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  void fill(double v) {
    for (double& x : *data_) x = v;
  }

  void zero() { fill(0.0); }

  bool all_finite() const {
    for (double x : *data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    if (std::memcmp(&da[i], &db[i], sizeof(double)) != 0) return false;
  }
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::fabs(da[i] - db[i]));
  return m;
}

}  // namespace mvgpt
