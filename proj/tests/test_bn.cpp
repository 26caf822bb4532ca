// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Normalization formula against elementwise scalar recomputation, running
// statistic updates, and the sync reduction contract.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dpt/bn.hpp"

using namespace dpt;

namespace {

// Independent scalar oracle: direct summation, no compensation.
template <typename T>
std::vector<double> scalar_bn_train_oracle(const std::vector<T>& x, double gamma, double beta,
                                           double eps) {
  double mean = 0.0;
  for (auto v : x) mean += static_cast<double>(v);
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (auto v : x) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y;
  for (auto v : x) y.push_back((static_cast<double>(v) - mean) / std::sqrt(var + eps) * gamma + beta);
  return y;
}

}  // namespace

TEST_CASE("bn_forward_train matches hand-applied formula") {
  SECTION("x=[1,3], gamma=1, beta=0, eps=0 -> [-1, 1]") {
    BnState<double> st(1);
    st.eps = 0.0;
    auto y = bn_forward_train<double>({{1.0, 3.0}}, st);
    CHECK_THAT(y[0][0], Catch::Matchers::WithinAbs(-1.0, 1e-12));
    CHECK_THAT(y[0][1], Catch::Matchers::WithinAbs(1.0, 1e-12));
  }

  SECTION("gamma=2, beta=1 -> [-1, 3]") {
    BnState<double> st(1);
    st.eps = 0.0;
    st.gamma[0] = 2.0;
    st.beta[0] = 1.0;
    auto y = bn_forward_train<double>({{1.0, 3.0}}, st);
    CHECK_THAT(y[0][0], Catch::Matchers::WithinAbs(-1.0, 1e-12));
    CHECK_THAT(y[0][1], Catch::Matchers::WithinAbs(3.0, 1e-12));
  }

  SECTION("momentum 0.1 moves running_mean 0 -> 0.2 for batch mean 2") {
    BnState<double> st(1);
    st.momentum = 0.1;
    bn_forward_train<double>({{1.0, 3.0}}, st);
    CHECK_THAT(st.running_mean[0], Catch::Matchers::WithinAbs(0.2, 1e-12));
    // unbiased variance of [1,3] is 2; running_var = 0.9*1 + 0.1*2
    CHECK_THAT(st.running_var[0], Catch::Matchers::WithinAbs(1.1, 1e-12));
    CHECK(st.initialized);
  }

  SECTION("momentum 1 makes running stats equal the batch stats exactly") {
    BnState<double> st(1);
    st.momentum = 1.0;
    bn_forward_train<double>({{1.0, 2.0, 3.0, 6.0}}, st);
    CHECK(st.running_mean[0] == 3.0);
    const double unbiased = ((2 * 2) + (1 * 1) + (0 * 0) + (3 * 3)) / 3.0;
    CHECK_THAT(st.running_var[0], Catch::Matchers::WithinAbs(unbiased, 1e-12));
  }

  SECTION("single-value channel rejected in train mode") {
    BnState<double> st(1);
    CHECK_THROWS_AS(bn_forward_train<double>({{1.0}}, st), Error);
  }
}

TEST_CASE("bn_forward_train matches scalar recomputation within 1e-7 on random batches") {
  Rng rng(17);
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = static_cast<int>(rng.uniform_int(2, 64));
    std::vector<double> x;
    for (int i = 0; i < n; ++i) x.push_back(rng.uniform(-10.0, 10.0));
    const double gamma = rng.uniform(-2.0, 2.0);
    const double beta = rng.uniform(-1.0, 1.0);

    BnState<double> st(1);
    st.gamma[0] = gamma;
    st.beta[0] = beta;
    auto y = bn_forward_train<double>({x}, st);
    auto expect = scalar_bn_train_oracle(x, gamma, beta, 1e-5);
    for (int i = 0; i < n; ++i) REQUIRE_THAT(y[0][i], Catch::Matchers::WithinAbs(expect[i], 1e-7));
  }
}

TEST_CASE("bn_forward_eval") {
  SECTION("x equal to the running mean collapses to beta") {
    BnState<double> st(1);
    st.running_mean[0] = 2.0;
    st.running_var[0] = 4.0;
    st.beta[0] = 0.25;
    st.initialized = true;
    auto y = bn_forward_eval<double>({{2.0}}, st);
    CHECK_THAT(y[0][0], Catch::Matchers::WithinAbs(0.25, 1e-12));
  }

  SECTION("gamma = 0 collapses every input to beta") {
    BnState<double> st(1);
    st.gamma[0] = 0.0;
    st.beta[0] = -1.5;
    st.running_mean[0] = 0.3;
    st.running_var[0] = 2.0;
    st.initialized = true;
    auto y = bn_forward_eval<double>({{-5.0, 0.0, 123.0}}, st);
    for (auto v : y[0]) CHECK(v == -1.5);
  }

  SECTION("random inputs match the scalar formula within 1e-7; state unchanged") {
    Rng rng(31);
    for (int rep = 0; rep < 200; ++rep) {
      BnState<double> st(1);
      st.running_mean[0] = rng.uniform(-3.0, 3.0);
      st.running_var[0] = rng.uniform(0.1, 5.0);
      st.gamma[0] = rng.uniform(-2.0, 2.0);
      st.beta[0] = rng.uniform(-1.0, 1.0);
      st.initialized = true;
      const auto saved = st;
      std::vector<double> x;
      for (int i = 0; i < 16; ++i) x.push_back(rng.uniform(-10.0, 10.0));
      auto y = bn_forward_eval<double>({x}, st);
      for (int i = 0; i < 16; ++i) {
        const double expect = (x[i] - saved.running_mean[0]) /
                                  std::sqrt(saved.running_var[0] + saved.eps) * saved.gamma[0] +
                              saved.beta[0];
        REQUIRE_THAT(y[0][i], Catch::Matchers::WithinAbs(expect, 1e-7));
      }
      CHECK(st.running_mean == saved.running_mean);
      CHECK(st.running_var == saved.running_var);
    }
  }

  SECTION("per-element output is independent of batch companions") {
    BnState<double> st(1);
    st.running_mean[0] = 0.7;
    st.running_var[0] = 1.3;
    st.initialized = true;
    auto solo = bn_forward_eval<double>({{2.5}}, st);
    auto batch = bn_forward_eval<double>({{-4.0, 2.5, 9.0, 0.0}}, st);
    CHECK(solo[0][0] == batch[0][1]);
  }

  SECTION("uninitialized stats rejected") {
    BnState<double> st(1);
    CHECK_THROWS_AS(bn_forward_eval<double>({{1.0}}, st), Error);
  }
}

TEST_CASE("sync_reduce_stats") {
  SECTION("workers [0] and [2] -> mean 1, biased var 1") {
    auto st = sync_reduce_stats<double>({{0.0}, {2.0}});
    CHECK_THAT(st.mean, Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(st.biased_var, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }

  SECTION("one worker is identical to local stats") {
    std::vector<double> vals{1.0, 4.0, -2.0, 0.5};
    auto st = sync_reduce_stats<double>({vals});
    auto local = compute_channel_stats(vals);
    CHECK(st.mean == local.mean);
    CHECK(st.biased_var == local.biased_var);
  }

  SECTION("k workers of batch b equal one worker of batch k*b within 1e-5") {
    Rng rng(12);
    for (int k : {2, 4, 8}) {
      std::vector<std::vector<double>> workers(k);
      std::vector<double> all;
      for (int w = 0; w < k; ++w) {
        for (int i = 0; i < 32; ++i) {
          const double v = rng.uniform(-5.0, 5.0);
          workers[w].push_back(v);
          all.push_back(v);
        }
      }
      auto split = sync_reduce_stats(workers);
      auto whole = sync_reduce_stats<double>({all});
      CHECK_THAT(split.mean, Catch::Matchers::WithinRel(whole.mean, 1e-5));
      CHECK_THAT(split.biased_var, Catch::Matchers::WithinRel(whole.biased_var, 1e-5));
    }
  }

  SECTION("reduction order perturbs results by less than 1e-7 relative") {
    Rng rng(13);
    std::vector<std::vector<double>> workers;
    for (int w = 0; w < 6; ++w) {
      std::vector<double> vals;
      for (int i = 0; i < 17 + w; ++i) vals.push_back(rng.uniform(-100.0, 100.0));
      workers.push_back(vals);
    }
    auto fwd = sync_reduce_stats(workers);
    std::reverse(workers.begin(), workers.end());
    auto rev = sync_reduce_stats(workers);
    CHECK_THAT(rev.mean, Catch::Matchers::WithinRel(fwd.mean, 1e-7));
    CHECK_THAT(rev.biased_var, Catch::Matchers::WithinRel(fwd.biased_var, 1e-7));
  }

  SECTION("all-empty input rejected") {
    CHECK_THROWS_AS(sync_reduce_stats<double>({{}, {}}), Error);
  }
}

TEST_CASE("float instantiation stays close to the double path") {
  Rng rng(41);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<float> xf;
    std::vector<double> xd;
    for (int i = 0; i < 32; ++i) {
      const double v = rng.uniform(-4.0, 4.0);
      xf.push_back(static_cast<float>(v));
      xd.push_back(static_cast<double>(static_cast<float>(v)));
    }
    BnState<float> sf(1);
    BnState<double> sd(1);
    auto yf = bn_forward_train<float>({xf}, sf);
    auto yd = bn_forward_train<double>({xd}, sd);
    for (int i = 0; i < 32; ++i)
      REQUIRE_THAT(static_cast<double>(yf[0][i]), Catch::Matchers::WithinAbs(yd[0][i], 1e-5));
  }
}
