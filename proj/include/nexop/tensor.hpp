#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "nexop/error.hpp"

namespace nexop {

using Shape = std::vector<std::size_t>;
using cplx = std::complex<double>;

// Over-aligned so vectorized kernels see the same layout on every allocation.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != shape_size(shape_))
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Row-major 2D access on the last two dimensions of a rank-2 tensor.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }
  double min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    assert(o.size() == size());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  assert(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Complex H×W image stored as paired real planes.
struct ComplexImage {
  Tensor re;
  Tensor im;

  ComplexImage() = default;
  ComplexImage(std::size_t height, std::size_t width)
      : re({height, width}), im({height, width}) {}
  ComplexImage(Tensor real, Tensor imag) : re(std::move(real)), im(std::move(imag)) {
    if (re.shape() != im.shape() || re.rank() != 2)
      throw ConfigError("complex image planes must share a rank-2 shape");
  }

  std::size_t height() const { return re.dim(0); }
  std::size_t width() const { return re.dim(1); }
  std::size_t size() const { return re.size(); }

  cplx get(std::size_t i) const { return {re[i], im[i]}; }
  void set(std::size_t i, cplx v) {
    re[i] = v.real();
    im[i] = v.imag();
  }

  std::vector<cplx> to_complex() const {
    std::vector<cplx> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = get(i);
    return out;
  }
  static ComplexImage from_complex(std::span<const cplx> v, std::size_t height, std::size_t width) {
    ComplexImage img(height, width);
    for (std::size_t i = 0; i < v.size(); ++i) img.set(i, v[i]);
    return img;
  }

  double squared_norm() const { return nexop::squared_norm(re.data()) + nexop::squared_norm(im.data()); }

  /// |z| per pixel.
  Tensor magnitude() const {
    Tensor out(re.shape());
    for (std::size_t i = 0; i < size(); ++i) out[i] = std::hypot(re[i], im[i]);
    return out;
  }
};

/// Re⟨a, b⟩ = Re Σ conj(a)·b, the real inner product used by adjoint tests.
inline double real_inner(const ComplexImage& a, const ComplexImage& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.re[i] * b.re[i] + a.im[i] * b.im[i];
  return s;
}

/// Packs complex images into a planar [N,2,H,W] tensor.
inline Tensor stack_planar(std::span<const ComplexImage> images) {
  if (images.empty()) return Tensor({0, 2, 0, 0});
  const std::size_t h = images[0].height(), w = images[0].width(), hw = h * w;
  Tensor out({images.size(), 2, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    std::copy(images[n].re.vec().begin(), images[n].re.vec().end(), out.vec().begin() + (2 * n) * hw);
    std::copy(images[n].im.vec().begin(), images[n].im.vec().end(), out.vec().begin() + (2 * n + 1) * hw);
  }
  return out;
}

inline std::vector<ComplexImage> unstack_planar(const Tensor& t) {
  const std::size_t n = t.dim(0), h = t.dim(2), w = t.dim(3), hw = h * w;
  std::vector<ComplexImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ComplexImage img(h, w);
    std::copy_n(t.vec().begin() + (2 * i) * hw, hw, img.re.vec().begin());
    std::copy_n(t.vec().begin() + (2 * i + 1) * hw, hw, img.im.vec().begin());
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace nexop
