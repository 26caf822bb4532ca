// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Scratch probe for the two-phase pipeline: direct pre-training (low-res
// imagenet-style, large batch) + fine-tuning vs from-scratch training at the
// fine-tune resolution with equal total steps. Development aid.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>

#include "dpt/synth.hpp"
#include "dpt/train.hpp"

using namespace dpt;

namespace {

TrainPhaseConfig pretrain_config(double base_lr, std::uint64_t seed, const std::string& out) {
  TrainPhaseConfig cfg;
  cfg.phase = Phase::pretrain;
  cfg.resize.strategy = ResizeStrategy::imagenet_style;
  cfg.resize.base_size = 64;
  cfg.total_batch = 32;
  cfg.bn_mode = BnMode::train;
  cfg.lr.base_lr = base_lr;
  cfg.lr.base_batch = 2;
  cfg.lr.scale_k = 16.0;
  cfg.lr.warmup_iters = 10;
  cfg.preset = SchedulePreset{"P1x", 3, Phase::pretrain};
  cfg.seed = seed;
  cfg.output_dir = out;
  return cfg;
}

TrainPhaseConfig finetune_config(double base_lr, std::uint64_t seed, const std::string& out,
                                 int epochs, BnMode bn) {
  TrainPhaseConfig cfg;
  cfg.phase = Phase::finetune;
  cfg.resize.strategy = ResizeStrategy::keep_ratio;
  cfg.resize.max_long = 160;
  cfg.resize.max_short = 128;
  cfg.total_batch = 8;
  cfg.bn_mode = bn;
  cfg.lr.base_lr = base_lr;
  cfg.lr.base_batch = 2;
  cfg.lr.scale_k = 4.0;
  cfg.lr.warmup_iters = 10;
  cfg.lr.decay_milestones = default_milestones(epochs);
  cfg.preset = SchedulePreset{"1x", epochs, Phase::finetune};
  cfg.seed = seed;
  cfg.output_dir = out;
  return cfg;
}

double eval_ap(const std::string& ckpt, const Dataset& val) {
  ToyDetector<TrainScalar> model;
  model.init_weights(0);
  load_partial<TrainScalar>(model.named_arrays(), ToyDetector<TrainScalar>::part_registry(),
                            read_checkpoint(ckpt), all_part_tags());
  ResizeSpec spec;
  spec.strategy = ResizeStrategy::keep_ratio;
  spec.max_long = 160;
  spec.max_short = 128;
  return evaluate_model(model, val, spec, /*with_masks=*/false).box_ap.ap;
}

}  // namespace

int main(int argc, char** argv) {
  const double base_lr = argc > 1 ? std::atof(argv[1]) : 0.01;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;
  const int images = argc > 3 ? std::atoi(argv[3]) : 500;

  SyntheticSpec train_spec;
  train_spec.num_images = images;
  train_spec.image_size = 96;
  train_spec.seed = 500;
  auto train_ds = generate_shapes_samples(train_spec);
  SyntheticSpec val_spec = train_spec;
  val_spec.num_images = 200;
  val_spec.seed = 900;
  val_spec.first_image_id = 100000;
  auto val_ds = generate_shapes_samples(val_spec);

  const std::string root = "/tmp/dpt_pipeline_probe";
  std::filesystem::remove_all(root);

  const auto t0 = std::chrono::steady_clock::now();

  auto pre = pretrain_config(base_lr, seed, root + "/pretrain");
  const auto pre_result = train_phase(pre, train_ds);
  std::printf("pretrain: %lld iters, final loss %.4f\n",
              static_cast<long long>(pre_result.iterations), pre_result.final_loss);

  auto ft = finetune_config(base_lr, seed, root + "/finetune", 3, BnMode::fixed);
  ft.load_checkpoint = pre_result.checkpoint_path;
  ft.load_parts = all_part_tags();
  if (const char* bn = std::getenv("PROBE_FT_BN")) ft.bn_mode = parse_bn_mode(bn);
  const auto ft_result = train_phase(ft, train_ds);
  std::printf("finetune: %lld iters, final loss %.4f\n",
              static_cast<long long>(ft_result.iterations), ft_result.final_loss);

  const auto total_steps = pre_result.iterations + ft_result.iterations;
  auto scratch = finetune_config(base_lr, seed, root + "/scratch",
                                 static_cast<int>((total_steps * 8 + images - 1) / images),
                                 BnMode::train);
  scratch.max_iters = total_steps;
  const auto sc_result = train_phase(scratch, train_ds);
  std::printf("scratch: %lld iters, final loss %.4f\n",
              static_cast<long long>(sc_result.iterations), sc_result.final_loss);

  const double direct_ap = eval_ap(ft_result.checkpoint_path, val_ds);
  const double scratch_ap = eval_ap(sc_result.checkpoint_path, val_ds);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("lr %.4g seed %llu: direct AP %.4f vs scratch AP %.4f (delta %+.4f), %.0fs total\n",
              base_lr, static_cast<unsigned long long>(seed), direct_ap, scratch_ap,
              direct_ap - scratch_ap, secs);
  return 0;
}
