#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdseg {

/// Dense row-major tensor; the last extent varies fastest in memory.
/// Network activations use [C,X,Y,Z], batched tensors [B,C,X,Y,Z].
template <class Scalar>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s, Scalar fill = Scalar(0))
      : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t e : s) {
      if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  Scalar* ptr() { return data.data(); }
  const Scalar* ptr() const { return data.data(); }

  Scalar& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const Scalar& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void fill(Scalar v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
    return out;
  }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <class S>
std::string shape_str(const Tensor<S>& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

template <class S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <class S>
void axpy(S a, const Tensor<S>& x, Tensor<S>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("axpy: shape mismatch");
  for (int64_t i = 0; i < x.numel(); ++i) y[i] += a * x[i];
}

}  // namespace mdseg
