// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Memory-constrained (resolution, batch) planner. Fits memory ~= c0 + c1*b*r^2
// to profiled records, filters a candidate grid against a byte budget, then
// ranks the survivors: measured AP first, the monotone b*r^2 heuristic for
// unmeasured configs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dpt/common.hpp"

namespace dpt {

/// One profiled training configuration.
struct MeasurementRecord {
  int batch = 0;
  int resolution = 0;           // square side, pixels
  double memory = 0.0;          // bytes per worker
  double time_per_iter = 0.0;   // seconds
  std::optional<double> ap;     // mAP percent, when the run was evaluated
};

struct PlannerQuery {
  std::vector<int> candidate_batches{2, 4, 8, 16};
  std::vector<int> candidate_resolutions{224, 320, 448, 640};
  double target_memory = 0.0;   // bytes per worker
  std::vector<MeasurementRecord> records;

  void validate() const {
    if (candidate_batches.empty() || candidate_resolutions.empty())
      throw Error("PlannerQuery: candidate grid must be non-empty");
    for (int b : candidate_batches)
      if (b <= 0) throw Error("PlannerQuery: batches must be positive");
    for (int r : candidate_resolutions)
      if (r <= 0) throw Error("PlannerQuery: resolutions must be positive");
    if (target_memory <= 0.0) throw Error("PlannerQuery: target_memory must be positive");
  }
};

/// Fitted coefficients of memory ~= c0 + c1 * b * r^2 (c1 clamped to >= 0).
struct MemoryModel {
  double c0 = 0.0;
  double c1 = 0.0;
  std::vector<double> residuals;  // per input record, observed - predicted

  double predict(int batch, int resolution) const {
    return c0 + c1 * static_cast<double>(batch) * static_cast<double>(resolution) *
                    static_cast<double>(resolution);
  }
};

/// Least-squares fit of the two-coefficient memory model. Requires at least
/// two records with distinct b*r^2 products.
inline MemoryModel fit_memory_model(const std::vector<MeasurementRecord>& records) {
  if (records.size() < 2)
    throw Error("fit_memory_model: need >= 2 records, got " + std::to_string(records.size()));
  std::vector<double> xs, ys;
  xs.reserve(records.size());
  for (const auto& r : records) {
    if (r.memory <= 0.0) throw Error("fit_memory_model: memory must be positive");
    xs.push_back(static_cast<double>(r.batch) * r.resolution * r.resolution);
    ys.push_back(r.memory);
  }
  const double x0 = xs.front();
  bool distinct = false;
  for (double x : xs) distinct = distinct || x != x0;
  if (!distinct) throw Error("fit_memory_model: rank-deficient records (all b*r^2 equal)");

  // Normal equations for y = c0 + c1*x, solved in double.
  KahanSum sx, sy, sxx, sxy;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx.add(xs[i]);
    sy.add(ys[i]);
    sxx.add(xs[i] * xs[i]);
    sxy.add(xs[i] * ys[i]);
  }
  const double n = static_cast<double>(xs.size());
  const double det = n * sxx.value() - sx.value() * sx.value();
  MemoryModel m;
  m.c1 = (n * sxy.value() - sx.value() * sy.value()) / det;
  m.c0 = (sy.value() - m.c1 * sx.value()) / n;
  if (m.c1 < 0.0) {
    // Activations cannot shrink with pixels; fall back to the constant model.
    m.c1 = 0.0;
    m.c0 = sy.value() / n;
  }
  m.residuals.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) m.residuals.push_back(ys[i] - (m.c0 + m.c1 * xs[i]));
  return m;
}

struct PlannerConfig {
  int batch = 0;
  int resolution = 0;
  double predicted_memory = 0.0;
  std::optional<double> ap;      // mean of measured APs for this (b, r)
  bool pareto = false;           // on the memory-vs-AP frontier
};

/// Grid points whose predicted memory fits the budget, ordered by ascending
/// predicted memory with ties broken by smaller batch, then resolution.
inline std::vector<PlannerConfig> feasible_configs(const PlannerQuery& query,
                                                   const MemoryModel& model) {
  query.validate();
  std::vector<PlannerConfig> out;
  for (int b : query.candidate_batches) {
    for (int r : query.candidate_resolutions) {
      const double mem = model.predict(b, r);
      if (mem <= query.target_memory) out.push_back({b, r, mem, std::nullopt, false});
    }
  }
  std::sort(out.begin(), out.end(), [](const PlannerConfig& a, const PlannerConfig& b) {
    if (a.predicted_memory != b.predicted_memory) return a.predicted_memory < b.predicted_memory;
    if (a.batch != b.batch) return a.batch < b.batch;
    return a.resolution < b.resolution;
  });
  return out;
}

/// Orders feasible configs: measured AP descending (ties by lower predicted
/// memory), then unmeasured configs by b*r^2 descending. Flags the memory/AP
/// Pareto frontier among measured configs. Permutation-invariant over the
/// record order (AP lookups average duplicates).
inline std::vector<PlannerConfig> rank_configs(std::vector<PlannerConfig> feasible,
                                               const std::vector<MeasurementRecord>& records) {
  if (feasible.empty()) throw Error("rank_configs: feasible set is empty");
  for (auto& cfg : feasible) {
    KahanSum sum;
    int n = 0;
    for (const auto& rec : records) {
      if (rec.batch == cfg.batch && rec.resolution == cfg.resolution && rec.ap.has_value()) {
        sum.add(*rec.ap);
        ++n;
      }
    }
    if (n > 0) cfg.ap = sum.value() / n;
  }

  const auto cost = [](const PlannerConfig& c) {
    return static_cast<double>(c.batch) * c.resolution * c.resolution;
  };
  std::sort(feasible.begin(), feasible.end(), [&](const PlannerConfig& a, const PlannerConfig& b) {
    if (a.ap.has_value() != b.ap.has_value()) return a.ap.has_value();
    if (a.ap.has_value()) {
      if (*a.ap != *b.ap) return *a.ap > *b.ap;
      if (a.predicted_memory != b.predicted_memory) return a.predicted_memory < b.predicted_memory;
    } else {
      if (cost(a) != cost(b)) return cost(a) > cost(b);
      if (a.predicted_memory != b.predicted_memory) return a.predicted_memory < b.predicted_memory;
    }
    if (a.batch != b.batch) return a.batch < b.batch;
    return a.resolution < b.resolution;
  });

  // Pareto frontier over (minimize memory, maximize AP), measured configs only.
  for (auto& c : feasible) {
    if (!c.ap.has_value()) continue;
    bool dominated = false;
    for (const auto& o : feasible) {
      if (&o == &c || !o.ap.has_value()) continue;
      const bool no_worse = o.predicted_memory <= c.predicted_memory && *o.ap >= *c.ap;
      const bool strictly = o.predicted_memory < c.predicted_memory || *o.ap > *c.ap;
      if (no_worse && strictly) {
        dominated = true;
        break;
      }
    }
    c.pareto = !dominated;
  }
  return feasible;
}

struct PlanReport {
  bool feasible = false;
  MemoryModel model;
  std::vector<PlannerConfig> ranking;  // empty when infeasible
  std::optional<PlannerConfig> chosen;
};

/// fit -> feasible -> rank; returns the top-ranked configuration, or an
/// explicit infeasibility result when nothing fits the budget.
inline PlanReport grid_search_plan(const PlannerQuery& query) {
  query.validate();
  PlanReport report;
  report.model = fit_memory_model(query.records);
  auto feasible = feasible_configs(query, report.model);
  if (feasible.empty()) return report;  // infeasible budget, signalled explicitly
  report.ranking = rank_configs(std::move(feasible), query.records);
  report.feasible = true;
  report.chosen = report.ranking.front();
  return report;
}

}  // namespace dpt
