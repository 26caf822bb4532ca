// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Batch normalization state and the per-channel statistics kernels. Four
// operating modes: train (batch stats, running update), affine (running
// stats, gamma/beta trainable), fixed (everything frozen), sync (batch stats
// reduced across workers before normalizing).
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dpt/common.hpp"

namespace dpt {

enum class BnMode { train, affine, fixed, sync };

inline const char* to_string(BnMode m) {
  switch (m) {
    case BnMode::train: return "train";
    case BnMode::affine: return "affine";
    case BnMode::fixed: return "fixed";
    case BnMode::sync: return "sync";
  }
  return "?";
}

inline BnMode parse_bn_mode(const std::string& s) {
  if (s == "train") return BnMode::train;
  if (s == "affine") return BnMode::affine;
  if (s == "fixed") return BnMode::fixed;
  if (s == "sync") return BnMode::sync;
  throw ConfigError("unknown bn_mode '" + s + "' (allowed: train, affine, fixed, sync)");
}

/// Per-layer normalization state: running statistics, learnable affine
/// parameters and the operating mode.
template <typename T>
struct BnState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::vector<T> gamma;
  std::vector<T> beta;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);
  BnMode mode = BnMode::train;
  bool initialized = false;  // running stats populated by training or a checkpoint

  BnState() = default;
  explicit BnState(std::size_t channels)
      : running_mean(channels, T(0)),
        running_var(channels, T(1)),
        gamma(channels, T(1)),
        beta(channels, T(0)) {}

  std::size_t channels() const { return gamma.size(); }
};

struct ChannelStats {
  double mean = 0.0;
  double biased_var = 0.0;    // divides by n, used for in-batch normalization
  double unbiased_var = 0.0;  // divides by n-1, used for the running update
  std::size_t count = 0;
};

/// Two-pass mean/variance with compensated summation.
template <typename T>
ChannelStats compute_channel_stats(const T* values, std::size_t n) {
  ChannelStats st;
  st.count = n;
  if (n == 0) return st;
  KahanSum sum;
  for (std::size_t i = 0; i < n; ++i) sum.add(static_cast<double>(values[i]));
  st.mean = sum.value() / static_cast<double>(n);
  KahanSum sq;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(values[i]) - st.mean;
    sq.add(d * d);
  }
  st.biased_var = sq.value() / static_cast<double>(n);
  st.unbiased_var = n > 1 ? sq.value() / static_cast<double>(n - 1) : 0.0;
  return st;
}

template <typename T>
ChannelStats compute_channel_stats(const std::vector<T>& values) {
  return compute_channel_stats(values.data(), values.size());
}

/// y = (x - E[x]) / sqrt(Var[x] + eps) * gamma + beta with the given moments.
template <typename T>
void bn_normalize(const T* x, std::size_t n, double mean, double var, double eps, double gamma,
                  double beta, T* y) {
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<T>((static_cast<double>(x[i]) - mean) * inv * gamma + beta);
  }
}

/// Train-mode forward on per-channel value vectors (outer index = channel).
/// Normalizes with the current batch's biased variance and updates running
/// statistics with momentum (unbiased variance for the running update).
template <typename T>
std::vector<std::vector<T>> bn_forward_train(const std::vector<std::vector<T>>& x,
                                             BnState<T>& state) {
  if (x.size() != state.channels()) throw Error("bn_forward_train: channel count mismatch");
  std::vector<std::vector<T>> y(x.size());
  const double m = static_cast<double>(state.momentum);
  for (std::size_t c = 0; c < x.size(); ++c) {
    if (x[c].size() < 2)
      throw Error("bn_forward_train: batch of size " + std::to_string(x[c].size()) +
                  " per channel; need >= 2 values (misconfigured pre-training batch?)");
    const auto st = compute_channel_stats(x[c]);
    y[c].resize(x[c].size());
    bn_normalize(x[c].data(), x[c].size(), st.mean, st.biased_var,
                 static_cast<double>(state.eps), static_cast<double>(state.gamma[c]),
                 static_cast<double>(state.beta[c]), y[c].data());
    state.running_mean[c] =
        static_cast<T>((1.0 - m) * static_cast<double>(state.running_mean[c]) + m * st.mean);
    state.running_var[c] =
        static_cast<T>((1.0 - m) * static_cast<double>(state.running_var[c]) + m * st.unbiased_var);
  }
  state.initialized = true;
  return y;
}

/// Eval forward: uses stored running statistics, leaves state untouched. The
/// per-element output is independent of batch companions by construction.
template <typename T>
std::vector<std::vector<T>> bn_forward_eval(const std::vector<std::vector<T>>& x,
                                            const BnState<T>& state) {
  if (x.size() != state.channels()) throw Error("bn_forward_eval: channel count mismatch");
  if (!state.initialized) throw Error("bn_forward_eval: running statistics are uninitialized");
  std::vector<std::vector<T>> y(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) {
    y[c].resize(x[c].size());
    bn_normalize(x[c].data(), x[c].size(), static_cast<double>(state.running_mean[c]),
                 static_cast<double>(state.running_var[c]), static_cast<double>(state.eps),
                 static_cast<double>(state.gamma[c]), static_cast<double>(state.beta[c]),
                 y[c].data());
  }
  return y;
}

struct SyncStats {
  double mean = 0.0;
  double biased_var = 0.0;
  double unbiased_var = 0.0;
  std::size_t count = 0;
};

/// Deterministic all-reduce over worker-local value sets: the result equals
/// the statistics of the concatenation of all workers' values. Compensated
/// summation keeps the reduction order-insensitive.
template <typename T>
SyncStats sync_reduce_stats(const std::vector<std::vector<T>>& worker_batches) {
  std::size_t total = 0;
  for (const auto& w : worker_batches) total += w.size();
  if (total == 0) throw Error("sync_reduce_stats: all worker batches are empty");

  KahanSum sum;
  for (const auto& w : worker_batches)
    for (const auto v : w) sum.add(static_cast<double>(v));
  SyncStats st;
  st.count = total;
  st.mean = sum.value() / static_cast<double>(total);

  KahanSum sq;
  for (const auto& w : worker_batches)
    for (const auto v : w) {
      const double d = static_cast<double>(v) - st.mean;
      sq.add(d * d);
    }
  st.biased_var = sq.value() / static_cast<double>(total);
  st.unbiased_var = total > 1 ? sq.value() / static_cast<double>(total - 1) : 0.0;
  return st;
}

}  // namespace dpt
