#pragma once
// Dense double-precision tensor, row-major, value semantics.
// All math in this project runs in double so finite-difference checks and
// cross-implementation oracle comparisons have headroom.

#include <cstdint>
#include <string>
#include <vector>

namespace arrowvid {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);          // zero-filled
  Tensor(Shape shape, double fill);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Multi-index access for tests and low-rate paths; hot loops index raw data.
  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;

  Tensor reshaped(Shape s) const;        // copies; numel must match
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double sum() const;
  double min() const;
  double max() const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Throws std::runtime_error mentioning `who` unless shapes match.
void check_same_shape(const char* who, const Tensor& a, const Tensor& b);

}  // namespace arrowvid
