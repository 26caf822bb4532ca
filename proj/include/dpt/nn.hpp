// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal CPU training layers (conv / batch norm / relu / linear) with
// explicit backward passes, plus momentum SGD. GEMMs go through Eigen;
// everything else is straightforward loops. Layers cache what backward
// needs; one forward is paired with at most one backward.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpt/bn.hpp"
#include "dpt/common.hpp"
#include "dpt/tensor.hpp"

namespace dpt::nn {

/// Named view of one parameter or buffer array inside a model.
template <typename T>
struct ArrayRef {
  std::string name;
  T* data = nullptr;
  T* grad = nullptr;  // null for buffers
  std::size_t size = 0;
  std::vector<std::int64_t> shape;
  bool weight_decay = false;
};

template <typename T>
using MatrixMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  void init_shape(std::vector<std::int64_t> shape) {
    value = Tensor<T>(shape);
    grad = Tensor<T>(std::move(shape));
  }
  void zero_grad() { grad.fill(T(0)); }
};

namespace detail {

template <typename T>
void im2col(const T* img, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            T* col) {
  // col layout: (c*k*k) rows, (oh*ow) columns, row-major
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) *
                           (static_cast<std::size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::memset(row + static_cast<std::size_t>(oy) * ow, 0, sizeof(T) * ow);
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[static_cast<std::size_t>(oy) * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
                T* img) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) *
                                 (static_cast<std::size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2D convolution, square kernel, NCHW.
template <typename T>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(int in_c, int out_c, int k, int stride, int pad, bool bias)
      : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad), has_bias_(bias) {
    weight_.init_shape({out_c, in_c, k, k});
    if (has_bias_) bias_.init_shape({out_c});
  }

  void init(Rng& rng) {
    // He-normal for the ReLU stacks this net is made of.
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c_) * k_ * k_));
    for (auto& v : weight_.value.data) v = static_cast<T>(rng.normal(0.0, stddev));
    if (has_bias_) bias_.value.fill(T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const auto n = x.shape[0], h = x.shape[2], w = x.shape[3];
    if (x.shape[1] != in_c_) throw Error("Conv2d: channel mismatch");
    const int oh = out_dim(static_cast<int>(h));
    const int ow = out_dim(static_cast<int>(w));
    input_ = x;
    Tensor<T> y({n, out_c_, oh, ow});
    std::vector<T> col(static_cast<std::size_t>(in_c_) * k_ * k_ * oh * ow);
    ConstMatrixMap<T> wmat(weight_.value.ptr(), out_c_, static_cast<std::size_t>(in_c_) * k_ * k_);
    for (std::int64_t i = 0; i < n; ++i) {
      detail::im2col(x.ptr() + i * in_c_ * h * w, in_c_, static_cast<int>(h), static_cast<int>(w),
                     k_, stride_, pad_, oh, ow, col.data());
      ConstMatrixMap<T> cmat(col.data(), static_cast<std::size_t>(in_c_) * k_ * k_,
                             static_cast<std::size_t>(oh) * ow);
      MatrixMap<T> ymat(y.ptr() + i * out_c_ * oh * ow, out_c_, static_cast<std::size_t>(oh) * ow);
      ymat.noalias() = wmat * cmat;
      if (has_bias_) {
        for (int oc = 0; oc < out_c_; ++oc) ymat.row(oc).array() += bias_.value.data[oc];
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const auto n = input_.shape[0], h = input_.shape[2], w = input_.shape[3];
    const int oh = static_cast<int>(dy.shape[2]);
    const int ow = static_cast<int>(dy.shape[3]);
    Tensor<T> dx(input_.shape);
    std::vector<T> col(static_cast<std::size_t>(in_c_) * k_ * k_ * oh * ow);
    std::vector<T> dcol(col.size());
    ConstMatrixMap<T> wmat(weight_.value.ptr(), out_c_, static_cast<std::size_t>(in_c_) * k_ * k_);
    MatrixMap<T> dwmat(weight_.grad.ptr(), out_c_, static_cast<std::size_t>(in_c_) * k_ * k_);
    for (std::int64_t i = 0; i < n; ++i) {
      detail::im2col(input_.ptr() + i * in_c_ * h * w, in_c_, static_cast<int>(h),
                     static_cast<int>(w), k_, stride_, pad_, oh, ow, col.data());
      ConstMatrixMap<T> cmat(col.data(), static_cast<std::size_t>(in_c_) * k_ * k_,
                             static_cast<std::size_t>(oh) * ow);
      ConstMatrixMap<T> dymat(dy.ptr() + i * out_c_ * oh * ow, out_c_,
                              static_cast<std::size_t>(oh) * ow);
      dwmat.noalias() += dymat * cmat.transpose();
      if (has_bias_) {
        for (int oc = 0; oc < out_c_; ++oc) bias_.grad.data[oc] += dymat.row(oc).sum();
      }
      MatrixMap<T> dcmat(dcol.data(), static_cast<std::size_t>(in_c_) * k_ * k_,
                         static_cast<std::size_t>(oh) * ow);
      dcmat.noalias() = wmat.transpose() * dymat;
      detail::col2im_add(dcol.data(), in_c_, static_cast<int>(h), static_cast<int>(w), k_, stride_,
                         pad_, oh, ow, dx.ptr() + i * in_c_ * h * w);
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ArrayRef<T>>& params) {
    params.push_back({prefix + ".weight", weight_.value.ptr(), weight_.grad.ptr(),
                      weight_.value.data.size(), weight_.value.shape, true});
    if (has_bias_)
      params.push_back({prefix + ".bias", bias_.value.ptr(), bias_.grad.ptr(),
                        bias_.value.data.size(), bias_.value.shape, false});
  }

  int out_dim(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
  int out_channels() const { return out_c_; }

private:
  int in_c_ = 0, out_c_ = 0, k_ = 3, stride_ = 1, pad_ = 1;
  bool has_bias_ = false;
  Parameter<T> weight_, bias_;
  Tensor<T> input_;
};

/// Spatial batch normalization over NCHW, honoring the four BnMode variants.
/// sync mode splits the batch into sync_workers chunks and reduces their
/// statistics through sync_reduce_stats before normalizing.
template <typename T>
class BatchNorm2d {
public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : state_(static_cast<std::size_t>(channels)),
        gamma_grad_(channels, T(0)),
        beta_grad_(channels, T(0)) {}

  BnState<T>& state() { return state_; }
  const BnState<T>& state() const { return state_; }
  void set_sync_workers(int workers) { sync_workers_ = workers < 1 ? 1 : workers; }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    const auto n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
    if (static_cast<std::size_t>(c) != state_.channels())
      throw Error("BatchNorm2d: channel mismatch");
    input_ = x;
    used_mean_.assign(c, 0.0);
    used_var_.assign(c, 0.0);
    const bool batch_stats =
        training && (state_.mode == BnMode::train || state_.mode == BnMode::sync);
    batch_stats_used_ = batch_stats;

    Tensor<T> y(x.shape);
    std::vector<T> scratch(static_cast<std::size_t>(n) * hw);
    const double m = static_cast<double>(state_.momentum);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      gather(x, ch, scratch);
      double mean, var;
      if (batch_stats) {
        if (scratch.size() < 2)
          throw Error("BatchNorm2d: batch of size 1 per channel in train mode");
        double unbiased;
        if (state_.mode == BnMode::sync && sync_workers_ > 1) {
          const auto st = sync_reduce_stats(split_workers(scratch, n, hw));
          mean = st.mean;
          var = st.biased_var;
          unbiased = st.unbiased_var;
        } else {
          const auto st = compute_channel_stats(scratch.data(), scratch.size());
          mean = st.mean;
          var = st.biased_var;
          unbiased = st.unbiased_var;
        }
        state_.running_mean[ch] =
            static_cast<T>((1.0 - m) * static_cast<double>(state_.running_mean[ch]) + m * mean);
        state_.running_var[ch] =
            static_cast<T>((1.0 - m) * static_cast<double>(state_.running_var[ch]) + m * unbiased);
      } else {
        mean = static_cast<double>(state_.running_mean[ch]);
        var = static_cast<double>(state_.running_var[ch]);
      }
      used_mean_[ch] = mean;
      used_var_[ch] = var;
      bn_normalize(scratch.data(), scratch.size(), mean, var, static_cast<double>(state_.eps),
                   static_cast<double>(state_.gamma[ch]), static_cast<double>(state_.beta[ch]),
                   scratch.data());
      scatter(scratch, ch, y);
    }
    if (batch_stats) state_.initialized = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const auto n = dy.shape[0], c = dy.shape[1], hw = dy.shape[2] * dy.shape[3];
    Tensor<T> dx(dy.shape);
    std::vector<T> xbuf(static_cast<std::size_t>(n) * hw);
    std::vector<T> gbuf(xbuf.size());
    const double eps = static_cast<double>(state_.eps);
    const bool accumulate_affine = state_.mode != BnMode::fixed;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      gather(input_, ch, xbuf);
      gather(dy, ch, gbuf);
      const double mean = used_mean_[ch];
      const double inv = 1.0 / std::sqrt(used_var_[ch] + eps);
      const double gamma = static_cast<double>(state_.gamma[ch]);
      const std::size_t count = xbuf.size();

      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double xhat = (static_cast<double>(xbuf[i]) - mean) * inv;
        sum_dy += static_cast<double>(gbuf[i]);
        sum_dy_xhat += static_cast<double>(gbuf[i]) * xhat;
      }
      if (accumulate_affine) {
        gamma_grad_[ch] += static_cast<T>(sum_dy_xhat);
        beta_grad_[ch] += static_cast<T>(sum_dy);
      }
      if (batch_stats_used_) {
        const double inv_count = 1.0 / static_cast<double>(count);
        for (std::size_t i = 0; i < count; ++i) {
          const double xhat = (static_cast<double>(xbuf[i]) - mean) * inv;
          const double g = static_cast<double>(gbuf[i]);
          xbuf[i] = static_cast<T>(gamma * inv *
                                   (g - sum_dy * inv_count - xhat * sum_dy_xhat * inv_count));
        }
      } else {
        // Frozen statistics act as constants: pure elementwise scale.
        for (std::size_t i = 0; i < count; ++i)
          xbuf[i] = static_cast<T>(static_cast<double>(gbuf[i]) * gamma * inv);
      }
      scatter(xbuf, ch, dx);
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ArrayRef<T>>& params,
               std::vector<ArrayRef<T>>& buffers) {
    const auto c = static_cast<std::int64_t>(state_.channels());
    params.push_back({prefix + ".gamma", state_.gamma.data(), gamma_grad_.data(),
                      state_.gamma.size(), {c}, false});
    params.push_back({prefix + ".beta", state_.beta.data(), beta_grad_.data(), state_.beta.size(),
                      {c}, false});
    buffers.push_back(
        {prefix + ".running_mean", state_.running_mean.data(), nullptr, state_.running_mean.size(), {c}, false});
    buffers.push_back(
        {prefix + ".running_var", state_.running_var.data(), nullptr, state_.running_var.size(), {c}, false});
  }

  /// gamma/beta join the trainable set in every mode except fixed.
  bool affine_trainable() const { return state_.mode != BnMode::fixed; }

private:
  void gather(const Tensor<T>& t, std::int64_t ch, std::vector<T>& out) const {
    const auto n = t.shape[0], c = t.shape[1], hw = t.shape[2] * t.shape[3];
    out.resize(static_cast<std::size_t>(n) * hw);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* src = t.ptr() + (i * c + ch) * hw;
      std::memcpy(out.data() + i * hw, src, sizeof(T) * static_cast<std::size_t>(hw));
    }
  }
  void scatter(const std::vector<T>& in, std::int64_t ch, Tensor<T>& t) const {
    const auto n = t.shape[0], c = t.shape[1], hw = t.shape[2] * t.shape[3];
    for (std::int64_t i = 0; i < n; ++i) {
      T* dst = t.ptr() + (i * c + ch) * hw;
      std::memcpy(dst, in.data() + i * hw, sizeof(T) * static_cast<std::size_t>(hw));
    }
  }
  std::vector<std::vector<T>> split_workers(const std::vector<T>& scratch, std::int64_t n,
                                            std::int64_t hw) const {
    const int k = std::min<std::int64_t>(sync_workers_, n);
    std::vector<std::vector<T>> workers(static_cast<std::size_t>(k));
    for (int w = 0; w < k; ++w) {
      const std::int64_t lo = n * w / k, hi = n * (w + 1) / k;
      workers[w].assign(scratch.begin() + lo * hw, scratch.begin() + hi * hw);
    }
    return workers;
  }

  BnState<T> state_;
  std::vector<T> gamma_grad_, beta_grad_;
  int sync_workers_ = 1;
  Tensor<T> input_;
  std::vector<double> used_mean_, used_var_;
  bool batch_stats_used_ = false;
};

template <typename T>
class Relu {
public:
  Tensor<T> forward(const Tensor<T>& x) {
    mask_.assign(x.data.size(), 0);
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      if (x.data[i] > T(0)) {
        y.data[i] = x.data[i];
        mask_[i] = 1;
      }
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.shape);
    for (std::size_t i = 0; i < dy.data.size(); ++i)
      if (mask_[i]) dx.data[i] = dy.data[i];
    return dx;
  }

private:
  std::vector<std::uint8_t> mask_;
};

/// Fully connected layer on (N, in) tensors.
template <typename T>
class Linear {
public:
  Linear() = default;
  Linear(int in, int out) : in_(in), out_(out) {
    weight_.init_shape({out, in});
    bias_.init_shape({out});
  }

  void init(Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_));
    for (auto& v : weight_.value.data) v = static_cast<T>(rng.normal(0.0, stddev));
    bias_.value.fill(T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    const auto n = x.shape[0];
    Tensor<T> y({n, out_});
    ConstMatrixMap<T> xm(x.ptr(), n, in_);
    ConstMatrixMap<T> wm(weight_.value.ptr(), out_, in_);
    MatrixMap<T> ym(y.ptr(), n, out_);
    ym.noalias() = xm * wm.transpose();
    for (std::int64_t i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) y.at2(i, o) += bias_.value.data[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const auto n = dy.shape[0];
    ConstMatrixMap<T> dym(dy.ptr(), n, out_);
    ConstMatrixMap<T> xm(input_.ptr(), n, in_);
    MatrixMap<T> dwm(weight_.grad.ptr(), out_, in_);
    dwm.noalias() += dym.transpose() * xm;
    for (std::int64_t i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) bias_.grad.data[o] += dy.at2(i, o);
    Tensor<T> dx({n, in_});
    ConstMatrixMap<T> wm(weight_.value.ptr(), out_, in_);
    MatrixMap<T> dxm(dx.ptr(), n, in_);
    dxm.noalias() = dym * wm;
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ArrayRef<T>>& params) {
    params.push_back({prefix + ".weight", weight_.value.ptr(), weight_.grad.ptr(),
                      weight_.value.data.size(), weight_.value.shape, true});
    params.push_back({prefix + ".bias", bias_.value.ptr(), bias_.grad.ptr(),
                      bias_.value.data.size(), bias_.value.shape, false});
  }

private:
  int in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
  Tensor<T> input_;
};

/// Momentum SGD. Velocities are keyed by parameter name so the trainable set
/// may change between phases without invalidating state.
template <typename T>
class SgdOptimizer {
public:
  explicit SgdOptimizer(double momentum = 0.9, double weight_decay = 0.0)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void zero_grad(const std::vector<ArrayRef<T>>& params) {
    for (const auto& p : params) std::memset(p.grad, 0, sizeof(T) * p.size);
  }

  void step(const std::vector<ArrayRef<T>>& params, double lr) {
    for (const auto& p : params) {
      auto& vel = velocity_[p.name];
      if (vel.size() != p.size) vel.assign(p.size, T(0));
      for (std::size_t i = 0; i < p.size; ++i) {
        double g = static_cast<double>(p.grad[i]);
        if (p.weight_decay && weight_decay_ != 0.0)
          g += weight_decay_ * static_cast<double>(p.data[i]);
        const double v = momentum_ * static_cast<double>(vel[i]) + g;
        vel[i] = static_cast<T>(v);
        p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) - lr * v);
      }
    }
  }

private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<std::string, std::vector<T>> velocity_;
};

/// Scales gradients so their global L2 norm is at most max_norm.
template <typename T>
double clip_grad_norm(const std::vector<ArrayRef<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (std::size_t i = 0; i < p.size; ++i) sq += static_cast<double>(p.grad[i]) * p.grad[i];
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params)
      for (std::size_t i = 0; i < p.size; ++i) p.grad[i] = static_cast<T>(p.grad[i] * scale);
  }
  return norm;
}

}  // namespace dpt::nn
