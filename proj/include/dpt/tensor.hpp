// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "dpt/common.hpp"

namespace dpt {

/// Dense row-major tensor with value semantics. The scalar type is a
/// template parameter so tests can run the exact same code in double while
/// training runs in float.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape[i]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // Indexing for the ranks used in the pipeline.
  T& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return data[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  T at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
    return data[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  T& at2(std::int64_t a, std::int64_t b) { return data[a * shape[1] + b]; }
  T at2(std::int64_t a, std::int64_t b) const { return data[a * shape[1] + b]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor<T>& operator+=(const Tensor<T>& o) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

/// NHWC float batch -> NCHW compute tensor (possibly changing scalar type).
template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<float>& in) {
  const auto n = in.shape[0], h = in.shape[1], w = in.shape[2], c = in.shape[3];
  Tensor<T> out({n, c, h, w});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t ch = 0; ch < c; ++ch)
          out.at4(i, ch, y, x) = static_cast<T>(in.at4(i, y, x, ch));
  return out;
}

}  // namespace dpt
