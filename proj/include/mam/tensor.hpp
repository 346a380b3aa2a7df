#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mam/errors.hpp"

namespace mam {

// Dense row-major tensor. float for training, double for gradient checks.
template <typename S>
struct TensorT {
  std::vector<int> dims;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> d) : dims(std::move(d)) {
    data.assign(static_cast<size_t>(numel_of(dims)), S(0));
  }
  TensorT(std::vector<int> d, std::vector<S> v)
      : dims(std::move(d)), data(std::move(v)) {
    if (static_cast<int64_t>(data.size()) != numel_of(dims))
      throw ShapeError("tensor data size does not match dims");
  }

  static int64_t numel_of(const std::vector<int>& d) {
    int64_t n = 1;
    for (int x : d) {
      if (x <= 0) throw ShapeError("tensor dims must be positive");
      n *= x;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(dims.size()); }

  // 2-D accessors (rows x cols).
  int rows() const { return dims.at(0); }
  int cols() const { return dims.at(1); }
  S& at(int r, int c) { return data[static_cast<size_t>(r) * dims[1] + c]; }
  S at(int r, int c) const {
    return data[static_cast<size_t>(r) * dims[1] + c];
  }

  // 3-D accessor (channels x height x width).
  S& at3(int c, int h, int w) {
    return data[(static_cast<size_t>(c) * dims[1] + h) * dims[2] + w];
  }
  S at3(int c, int h, int w) const {
    return data[(static_cast<size_t>(c) * dims[1] + h) * dims[2] + w];
  }

  bool same_dims(const TensorT& o) const { return dims == o.dims; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> out;
    out.dims = dims;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

inline std::string dims_str(const std::vector<int>& d) {
  std::string s = "[";
  for (size_t i = 0; i < d.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(d[i]);
  }
  return s + "]";
}

}  // namespace mam
