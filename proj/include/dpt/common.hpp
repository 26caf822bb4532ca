// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dpt {

/// Base error for all pipeline failures surfaced to callers.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Configuration/schema violations. Maps onto CLI exit code 3.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Corrupted or truncated on-disk artifacts (checkpoints, datasets).
class IntegrityError : public Error {
public:
  explicit IntegrityError(const std::string& what) : Error(what) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Mixes an arbitrary tuple of integers into one seed. Used to derive
/// per-sample and per-iteration streams from the global seed so that
/// worker scheduling never changes results.
inline std::uint64_t derive_seed(std::uint64_t a) { return splitmix64(a); }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return derive_seed(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ull + (splitmix64(a) << 6)), rest...);
}

/// Deterministic random stream. Distribution helpers are hand-rolled on top
/// of mt19937_64 output so draws are bit-identical across standard library
/// implementations.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform double in [0, 1).
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [lo, hi], endpoints included.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw Error("uniform_int: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    auto draw = static_cast<std::uint64_t>(uniform01() * static_cast<double>(span));
    if (draw >= span) draw = span - 1;
    return lo + static_cast<std::int64_t>(draw);
  }

  /// Normal via Box-Muller; fixed draw order.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

private:
  std::mt19937_64 eng_;
};

/// Per-sample stream: hash(global_seed, epoch, sample_index).
inline Rng sample_rng(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t sample_index) {
  return Rng(derive_seed(global_seed, epoch, sample_index));
}

/// Neumaier-compensated accumulator. Keeps reductions insensitive to
/// summation order at the 1e-7-relative level the sync contract promises.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double v) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      comp += (sum - t) + v;
    } else {
      comp += (v - t) + sum;
    }
    sum = t;
  }

  double value() const { return sum + comp; }
};

}  // namespace dpt
