// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "dpt/planner.hpp"

using namespace dpt;

namespace {

std::vector<MeasurementRecord> synthetic_records(double c0, double c1, Rng& rng, int count) {
  std::vector<MeasurementRecord> recs;
  for (int i = 0; i < count; ++i) {
    MeasurementRecord r;
    r.batch = static_cast<int>(rng.uniform_int(1, 32));
    r.resolution = static_cast<int>(rng.uniform_int(64, 800));
    r.memory = c0 + c1 * r.batch * static_cast<double>(r.resolution) * r.resolution;
    r.time_per_iter = 0.1;
    recs.push_back(r);
  }
  return recs;
}

// Measured rows used throughout: AP percent by (batch, resolution).
std::vector<MeasurementRecord> measured_grid_records() {
  const auto mem = [](int b, int r) { return 1e9 + 5.0 * b * static_cast<double>(r) * r; };
  std::vector<MeasurementRecord> recs;
  recs.push_back({2, 448, mem(2, 448), 0.30, 39.3});
  recs.push_back({4, 448, mem(4, 448), 0.35, 40.6});
  recs.push_back({8, 448, mem(8, 448), 0.45, 41.5});
  recs.push_back({4, 320, mem(4, 320), 0.28, 39.9});
  recs.push_back({4, 640, mem(4, 640), 0.50, 41.1});
  return recs;
}

}  // namespace

TEST_CASE("fit_memory_model") {
  SECTION("recovers synthetic linear coefficients within 1e-6 relative") {
    Rng rng(3);
    auto recs = synthetic_records(1e9, 5.0, rng, 24);
    auto model = fit_memory_model(recs);
    CHECK_THAT(model.c0, Catch::Matchers::WithinRel(1e9, 1e-6));
    CHECK_THAT(model.c1, Catch::Matchers::WithinRel(5.0, 1e-6));
    for (double r : model.residuals) CHECK(std::abs(r) <= 1e-3 * 1e9);
  }

  SECTION("single record is underdetermined") {
    CHECK_THROWS_AS(fit_memory_model({{8, 448, 5e9, 0.4, std::nullopt}}), Error);
  }

  SECTION("two exact points interpolate exactly") {
    std::vector<MeasurementRecord> recs;
    recs.push_back({2, 100, 2e9 + 3.0 * 2 * 100 * 100, 0.1, std::nullopt});
    recs.push_back({8, 200, 2e9 + 3.0 * 8 * 200 * 200, 0.1, std::nullopt});
    auto model = fit_memory_model(recs);
    CHECK_THAT(model.c0, Catch::Matchers::WithinRel(2e9, 1e-9));
    CHECK_THAT(model.c1, Catch::Matchers::WithinRel(3.0, 1e-9));
  }

  SECTION("rank-deficient inputs rejected") {
    std::vector<MeasurementRecord> recs;
    recs.push_back({2, 200, 3e9, 0.1, std::nullopt});
    recs.push_back({8, 100, 3e9, 0.1, std::nullopt});  // same b*r^2 product
    CHECK_THROWS_AS(fit_memory_model(recs), Error);
  }

  SECTION("negative slope is clamped to the constant model") {
    std::vector<MeasurementRecord> recs;
    recs.push_back({2, 100, 5e9, 0.1, std::nullopt});
    recs.push_back({8, 400, 1e9, 0.1, std::nullopt});
    auto model = fit_memory_model(recs);
    CHECK(model.c1 == 0.0);
    CHECK(model.c0 == 3e9);
  }

  SECTION("predicted memory is strictly increasing in b and r when c1 > 0") {
    Rng rng(4);
    auto model = fit_memory_model(synthetic_records(1e9, 5.0, rng, 10));
    for (int b : {2, 4, 8}) {
      CHECK(model.predict(2 * b, 448) > model.predict(b, 448));
    }
    for (int r : {224, 320, 448}) {
      CHECK(model.predict(4, r + 64) > model.predict(4, r));
    }
  }
}

TEST_CASE("feasible_configs") {
  MemoryModel model;
  model.c0 = 1e9;
  model.c1 = 5.0;
  PlannerQuery query;
  query.records = measured_grid_records();

  SECTION("budget below c0 is empty") {
    query.target_memory = 0.5e9;
    CHECK(feasible_configs(query, model).empty());
  }

  SECTION("unbounded budget admits the full 4x4 grid") {
    query.target_memory = 1e18;
    CHECK(feasible_configs(query, model).size() == 16);
  }

  SECTION("equals brute-force filtering for 100 random budgets") {
    Rng rng(9);
    for (int rep = 0; rep < 100; ++rep) {
      query.target_memory = rng.uniform(0.1e9, 4e10);
      auto got = feasible_configs(query, model);
      std::size_t expect = 0;
      for (int b : query.candidate_batches)
        for (int r : query.candidate_resolutions)
          if (model.c0 + model.c1 * b * static_cast<double>(r) * r <= query.target_memory) ++expect;
      REQUIRE(got.size() == expect);
      for (const auto& cfg : got) REQUIRE(cfg.predicted_memory <= query.target_memory);
      // deterministic order: ascending predicted memory
      for (std::size_t i = 1; i < got.size(); ++i)
        REQUIRE(got[i - 1].predicted_memory <= got[i].predicted_memory);
    }
  }
}

TEST_CASE("rank_configs") {
  MemoryModel model;
  model.c0 = 1e9;
  model.c1 = 5.0;
  PlannerQuery query;
  query.target_memory = 11.0 * (1ull << 30);  // 11 GB card
  auto records = measured_grid_records();

  SECTION("measured APs rank (8,448) above (4,448) above (2,448)") {
    auto ranked = rank_configs(feasible_configs(query, model), records);
    const auto pos = [&](int b, int r) {
      for (std::size_t i = 0; i < ranked.size(); ++i)
        if (ranked[i].batch == b && ranked[i].resolution == r) return static_cast<int>(i);
      return -1;
    };
    REQUIRE(pos(8, 448) >= 0);
    CHECK(pos(8, 448) < pos(4, 448));
    CHECK(pos(4, 448) < pos(2, 448));
    CHECK(pos(4, 640) < pos(4, 448));  // 41.1 beats 40.6
  }

  SECTION("no records at all -> pure heuristic order, largest b*r^2 first") {
    auto ranked = rank_configs(feasible_configs(query, model), {});
    for (std::size_t i = 1; i < ranked.size(); ++i) {
      const auto cost = [](const PlannerConfig& c) {
        return static_cast<double>(c.batch) * c.resolution * c.resolution;
      };
      REQUIRE(cost(ranked[i - 1]) >= cost(ranked[i]));
    }
  }

  SECTION("ranking is permutation-invariant over record order") {
    auto ranked1 = rank_configs(feasible_configs(query, model), records);
    std::reverse(records.begin(), records.end());
    auto ranked2 = rank_configs(feasible_configs(query, model), records);
    REQUIRE(ranked1.size() == ranked2.size());
    for (std::size_t i = 0; i < ranked1.size(); ++i) {
      CHECK(ranked1[i].batch == ranked2[i].batch);
      CHECK(ranked1[i].resolution == ranked2[i].resolution);
    }
  }

  SECTION("duplicate records average their APs") {
    std::vector<MeasurementRecord> recs = records;
    recs.push_back({8, 448, 9e9, 0.45, 40.0});  // second run of (8,448)
    auto ranked = rank_configs(feasible_configs(query, model), recs);
    for (const auto& c : ranked) {
      if (c.batch == 8 && c.resolution == 448) {
        CHECK_THAT(*c.ap, Catch::Matchers::WithinAbs((41.5 + 40.0) / 2.0, 1e-12));
      }
    }
  }
}

TEST_CASE("grid_search_plan") {
  PlannerQuery query;
  query.records = measured_grid_records();

  SECTION("11 GB budget with measured records picks (8, 448)") {
    query.target_memory = 11.0 * (1ull << 30);
    auto report = grid_search_plan(query);
    REQUIRE(report.feasible);
    REQUIRE(report.chosen.has_value());
    CHECK(report.chosen->batch == 8);
    CHECK(report.chosen->resolution == 448);
  }

  SECTION("infeasible budget is an explicit result, not an error") {
    query.target_memory = 1.0;  // below c0
    // validate() rejects non-positive budgets, 1 byte is legal but hopeless
    auto report = grid_search_plan(query);
    CHECK_FALSE(report.feasible);
    CHECK(report.ranking.empty());
    CHECK_FALSE(report.chosen.has_value());
  }

  SECTION("equivalent to exhaustive evaluation on the 4x4 grid") {
    query.target_memory = 11.0 * (1ull << 30);
    auto report = grid_search_plan(query);
    REQUIRE(report.feasible);
    // brute force: best AP among feasible measured configs
    double best_ap = -1.0;
    int best_b = 0, best_r = 0;
    for (int b : query.candidate_batches) {
      for (int r : query.candidate_resolutions) {
        const double mem = report.model.predict(b, r);
        if (mem > query.target_memory) continue;
        for (const auto& rec : query.records) {
          if (rec.batch == b && rec.resolution == r && rec.ap && *rec.ap > best_ap) {
            best_ap = *rec.ap;
            best_b = b;
            best_r = r;
          }
        }
      }
    }
    REQUIRE(best_ap > 0.0);
    CHECK(report.chosen->batch == best_b);
    CHECK(report.chosen->resolution == best_r);
  }

  SECTION("pareto frontier flags non-dominated measured configs") {
    query.target_memory = 1e18;
    auto report = grid_search_plan(query);
    for (const auto& c : report.ranking) {
      if (!c.ap.has_value()) continue;
      bool dominated = false;
      for (const auto& o : report.ranking) {
        if (!o.ap.has_value()) continue;
        if (&o == &c) continue;
        if (o.predicted_memory <= c.predicted_memory && *o.ap >= *c.ap &&
            (o.predicted_memory < c.predicted_memory || *o.ap > *c.ap))
          dominated = true;
      }
      CHECK(c.pareto == !dominated);
    }
  }
}
