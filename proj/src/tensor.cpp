#include "cdm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "cdm/error.hpp"

namespace cdm {

namespace {

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw InvalidArgument("negative tensor dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (data_.size() != element_count(shape_)) {
    throw InvalidArgument("value count " + std::to_string(data_.size()) + " does not match shape " +
                          shape_string(shape_));
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank()) throw InvalidArgument("axis out of range");
  return shape_[axis];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (element_count(shape) != data_.size()) {
    throw InvalidArgument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

Tensor Tensor::slice(int begin, int end) const {
  if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end) {
    throw InvalidArgument("bad slice of " + shape_string(shape_));
  }
  const std::size_t row = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  std::vector<int> shape = shape_;
  shape[0] = end - begin;
  Tensor out(std::move(shape));
  std::copy(data_.begin() + begin * row, data_.begin() + end * row, out.data_.begin());
  return out;
}

Tensor Tensor::gather(std::span<const int> rows) const {
  if (rank() == 0) throw InvalidArgument("cannot gather from a scalar");
  const std::size_t row = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  std::vector<int> shape = shape_;
  shape[0] = static_cast<int>(rows.size());
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= shape_[0]) throw InvalidArgument("gather index out of range");
    std::copy_n(data_.begin() + rows[i] * row, row, out.data_.begin() + i * row);
  }
  return out;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "tensor +=");
  std::transform(data_.begin(), data_.end(), other.data_.begin(), data_.begin(), std::plus<>());
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape(*this, other, "tensor -=");
  std::transform(data_.begin(), data_.end(), other.data_.begin(), data_.begin(), std::minus<>());
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (double& v : data_) v *= scale;
  return *this;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                          " vs " + shape_string(b.shape()));
  }
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    throw InvalidArgument("concat_channels: incompatible shapes " + shape_string(a.shape()) +
                          " and " + shape_string(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return out;
}

void split_channels(const Tensor& x, int channels, Tensor& first, Tensor& second) {
  if (x.rank() != 4 || channels < 0 || channels > x.dim(1)) {
    throw InvalidArgument("split_channels: bad split of " + shape_string(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), rest = c - channels;
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  first = Tensor({n, channels, x.dim(2), x.dim(3)});
  second = Tensor({n, rest, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * c * hw, channels * hw, first.data() + i * channels * hw);
    std::copy_n(x.data() + (i * c + channels) * hw, rest * hw, second.data() + i * rest * hw);
  }
}

Tensor plane(const Tensor& x, int n, int c) {
  if (x.rank() != 4 || n >= x.dim(0) || c >= x.dim(1)) {
    throw InvalidArgument("plane: index out of range for " + shape_string(x.shape()));
  }
  const int h = x.dim(2), w = x.dim(3);
  Tensor out({h, w});
  std::copy_n(&x.at(n, c, 0, 0), static_cast<std::size_t>(h) * w, out.data());
  return out;
}

}  // namespace cdm
