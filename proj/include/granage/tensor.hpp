#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "granage/common.hpp"

namespace granage {

// Dense row-major tensor of doubles. Images are {C,H,W}, batches {N,C,H,W},
// feature matrices {N,F}.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(count(shape), 0.0) {}
  Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) throw ValueError("tensor: data size does not match shape");
  }

  static size_t count(const std::vector<int64_t>& s) {
    size_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw ValueError("tensor: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  int64_t dim(size_t i) const { return shape.at(i); }
  size_t numel() const { return data.size(); }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::string s = "{";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "}";
  }
};

}  // namespace granage
