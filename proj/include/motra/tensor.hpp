#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace motra {

// Dense row-major tensor. Rank is dynamic; most of the code uses
// (C,H,W) or (N,C,H,W) layouts with channel-major rasters.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  Tensor(std::vector<int> s, T fill) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 1) throw std::invalid_argument("tensor dims must be >= 1");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // (c,h,w) indexing for rank-3 tensors
  T& at3(int c, int h, int w) {
    return data[(static_cast<size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  const T& at3(int c, int h, int w) const {
    return data[(static_cast<size_t>(c) * shape[1] + h) * shape[2] + w];
  }

  // (n,c,h,w) indexing for rank-4 tensors
  T& at4(int n, int c, int h, int w) {
    return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  void add_(const Tensor& o) {
    for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
  }
  void scale_(T s) {
    for (auto& v : data) v *= s;
  }

  T sum() const { return std::accumulate(data.begin(), data.end(), T(0)); }
  T abs_max() const {
    T m = 0;
    for (T v : data) m = std::max(m, std::abs(v));
    return m;
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> r;
    r.shape = shape;
    r.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) r.data[i] = static_cast<U>(data[i]);
    return r;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }
};

template <typename T>
inline void check_shape(const Tensor<T>& t, const std::vector<int>& s, const char* what) {
  if (t.shape != s) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch, got " + t.shape_str());
  }
}

template <typename T>
inline double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

}  // namespace motra
