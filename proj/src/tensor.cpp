#include "arrowvid/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace arrowvid {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int64_t d : shape_)
    if (d <= 0) throw std::runtime_error("tensor: nonpositive dim in " + shape_str(shape_));
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, double fill) : Tensor(std::move(shape)) {
  std::fill(data_.begin(), data_.end(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
    throw std::runtime_error("tensor: data size does not match shape " + shape_str(shape_));
}

static int64_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx) {
  if (idx.size() != shape.size()) throw std::runtime_error("tensor: index rank mismatch");
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= shape[k]) throw std::runtime_error("tensor: index out of range");
    flat = flat * shape[k] + i;
    ++k;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<int64_t> idx) { return data_[static_cast<size_t>(flat_index(shape_, idx))]; }
double Tensor::at(std::initializer_list<int64_t> idx) const { return data_[static_cast<size_t>(flat_index(shape_, idx))]; }

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != numel())
    throw std::runtime_error("tensor: reshape " + shape_str(shape_) + " -> " + shape_str(s));
  Tensor out;
  out.shape_ = std::move(s);
  out.data_ = data_;
  return out;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::min() const {
  double m = data_.empty() ? 0.0 : data_[0];
  for (double v : data_) m = std::min(m, v);
  return m;
}

double Tensor::max() const {
  double m = data_.empty() ? 0.0 : data_[0];
  for (double v : data_) m = std::max(m, v);
  return m;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void check_same_shape(const char* who, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::runtime_error(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace arrowvid
