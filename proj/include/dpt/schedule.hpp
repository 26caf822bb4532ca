// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Learning-rate policies and schedule presets. Pre-training presets (P1x..)
// hold the scaled learning rate constant after warmup; fine-tuning presets
// (1x, 2x) step-decay at fixed epoch milestones.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpt/common.hpp"

namespace dpt {

enum class Phase { pretrain, finetune };

inline const char* to_string(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

inline Phase parse_phase(const std::string& s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  throw ConfigError("unknown phase '" + s + "' (allowed: pretrain, finetune)");
}

/// Linear-scaling-rule learning rate policy with linear warmup.
/// Peak LR is base_lr * scale_k where scale_k = batch / base_batch.
struct LrPolicy {
  double base_lr = 0.02;             // LR at the reference batch size
  int base_batch = 2;                // reference batch size
  double scale_k = 1.0;              // batch multiplier k
  int warmup_iters = 500;
  double warmup_start_fraction = 1.0 / 3.0;
  std::vector<int> decay_milestones; // epochs; empty for constant policies
  double decay_factor = 0.1;
};

struct SchedulePreset {
  std::string name;
  int epochs = 12;
  Phase phase = Phase::pretrain;
};

/// Standard presets: P1x..P4x pre-train at 12/24/36/48 epochs, 1x/2x
/// fine-tune at 12/24.
inline SchedulePreset make_preset(const std::string& name) {
  if (name == "P1x") return {name, 12, Phase::pretrain};
  if (name == "P2x") return {name, 24, Phase::pretrain};
  if (name == "P3x") return {name, 36, Phase::pretrain};
  if (name == "P4x") return {name, 48, Phase::pretrain};
  if (name == "1x") return {name, 12, Phase::finetune};
  if (name == "2x") return {name, 24, Phase::finetune};
  throw ConfigError("unknown schedule preset '" + name +
                    "' (allowed: P1x, P2x, P3x, P4x, 1x, 2x)");
}

/// Default decay milestones for a fine-tune schedule: 1x -> {8, 11},
/// 2x -> {16, 22}; other epoch counts scale those fractions (8/12, 11/12)
/// and collapse to a single milestone when the two collide.
inline std::vector<int> default_milestones(int epochs) {
  if (epochs == 12) return {8, 11};
  if (epochs == 24) return {16, 22};
  int a = static_cast<int>(std::floor(epochs * 8.0 / 12.0));
  int b = static_cast<int>(std::floor(epochs * 11.0 / 12.0));
  if (a < 1) a = 1;
  if (b >= epochs) b = epochs - 1;
  if (b <= a) return {a};
  return {a, b};
}

/// Linear scaling rule: when the batch is multiplied by k, so is the LR.
inline double scaled_lr(const LrPolicy& policy, int batch) {
  if (batch <= 0) throw Error("scaled_lr: batch must be positive");
  return policy.base_lr * (static_cast<double>(batch) / policy.base_batch);
}

/// LR at a given iteration: linear warmup from warmup_start_fraction * peak
/// to peak over warmup_iters, then constant (pretrain) or step-decayed at the
/// milestone epochs (finetune).
///
/// Warmup formula (iter < w): lr = peak * (f + (1 - f) * iter / w).
inline double lr_at(const LrPolicy& policy, const SchedulePreset& preset, std::int64_t iteration,
                    std::int64_t iters_per_epoch) {
  if (iters_per_epoch <= 0) throw Error("lr_at: iters_per_epoch must be positive");
  const double peak = policy.base_lr * policy.scale_k;
  if (policy.warmup_iters > 0 && iteration < policy.warmup_iters) {
    const double f = policy.warmup_start_fraction;
    return peak * (f + (1.0 - f) * static_cast<double>(iteration) / policy.warmup_iters);
  }
  if (preset.phase == Phase::pretrain) return peak;
  const std::int64_t epoch = iteration / iters_per_epoch;
  double lr = peak;
  for (const int m : policy.decay_milestones) {
    if (epoch >= m) lr *= policy.decay_factor;
  }
  return lr;
}

/// ceil(dataset_size / total_batch) * epochs, so every image is seen each
/// epoch.
inline std::int64_t epochs_to_iters(std::int64_t dataset_size, std::int64_t total_batch,
                                    std::int64_t epochs) {
  if (dataset_size <= 0 || total_batch <= 0 || epochs <= 0)
    throw Error("epochs_to_iters: all arguments must be positive");
  return ((dataset_size + total_batch - 1) / total_batch) * epochs;
}

}  // namespace dpt
