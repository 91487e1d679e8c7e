#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace cdm {

/// 64-byte aligned allocator. Vectorized reductions peel a scalar head that
/// depends on the buffer address, so aligned storage keeps results identical
/// from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles with a small dynamic shape.
///
/// Images are laid out NCHW, vectors as [N, D]. The class owns its storage
/// and has value semantics; views are handed out as std::span.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const AlignedVector& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW element access; rank must be 4.
  double& at(int n, int c, int h, int w) noexcept {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const double& at(int n, int c, int h, int w) const noexcept {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  // [N, D] element access; rank must be 2.
  double& at(int n, int d) noexcept { return data_[static_cast<std::size_t>(n) * shape_[1] + d]; }
  const double& at(int n, int d) const noexcept { return data_[static_cast<std::size_t>(n) * shape_[1] + d]; }

  void fill(double value);
  Tensor reshaped(std::vector<int> shape) const;

  /// Rows [begin, end) along the leading axis.
  Tensor slice(int begin, int end) const;
  /// Gathers leading-axis entries in the given order.
  Tensor gather(std::span<const int> rows) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double scale);

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<int> shape_;
  AlignedVector data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

std::string shape_string(const std::vector<int>& shape);

/// Throws InvalidArgument naming `what` when the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Concatenates two NCHW tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Inverse of concat_channels: splits off the first `channels` channels.
void split_channels(const Tensor& x, int channels, Tensor& first, Tensor& second);

/// Single [H, W] plane (n, c) of an NCHW tensor.
Tensor plane(const Tensor& x, int n, int c);

}  // namespace cdm
