// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Scratch probe: trains the toy detector briefly on synthetic shapes and
// prints the loss curve and validation AP. Development aid, not a shipped
// command.

#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "dpt/synth.hpp"
#include "dpt/train.hpp"

using namespace dpt;

int main(int argc, char** argv) {
  const double base_lr = argc > 1 ? std::atof(argv[1]) : 0.02;
  const int epochs = argc > 2 ? std::atoi(argv[2]) : 3;
  const int images = argc > 3 ? std::atoi(argv[3]) : 200;
  const std::uint64_t seed = argc > 4 ? std::strtoull(argv[4], nullptr, 10) : 1;

  SyntheticSpec train_spec;
  train_spec.num_images = images;
  train_spec.image_size = 96;
  train_spec.seed = 500;
  auto train_ds = generate_shapes_samples(train_spec);

  SyntheticSpec val_spec = train_spec;
  val_spec.num_images = 60;
  val_spec.seed = 900;
  val_spec.first_image_id = 100000;
  auto val_ds = generate_shapes_samples(val_spec);

  TrainPhaseConfig cfg;
  cfg.phase = Phase::finetune;
  cfg.resize.strategy = ResizeStrategy::keep_ratio;
  cfg.resize.max_long = 160;
  cfg.resize.max_short = 128;
  cfg.total_batch = 8;
  cfg.bn_mode = BnMode::train;
  cfg.lr.base_lr = base_lr;
  cfg.lr.base_batch = 2;
  cfg.lr.scale_k = cfg.total_batch / 2.0;
  cfg.lr.warmup_iters = 20;
  cfg.lr.decay_milestones = default_milestones(epochs);
  cfg.preset = SchedulePreset{"1x", epochs, Phase::finetune};
  cfg.seed = seed;
  cfg.output_dir = "/tmp/dpt_probe";
  std::filesystem::remove_all(cfg.output_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train_phase(cfg, train_ds);
  const double train_secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (std::size_t i = 0; i < result.records.size(); i += std::max<std::size_t>(1, result.records.size() / 12)) {
    const auto& r = result.records[i];
    std::printf("iter %4lld  lr %.4f  loss %.4f (obj %.3f box %.3f cls %.3f reg %.3f mask %.3f)\n",
                static_cast<long long>(r.iter), r.lr, r.loss, r.loss_rpn_obj, r.loss_rpn_box,
                r.loss_cls, r.loss_box, r.loss_mask);
  }
  std::printf("final loss %.4f, %lld iters, %.1fs train (%.3fs/iter)\n", result.final_loss,
              static_cast<long long>(result.iterations), train_secs,
              train_secs / result.iterations);

  ToyDetector<TrainScalar> model;
  model.init_weights(cfg.seed);
  load_partial<TrainScalar>(model.named_arrays(), ToyDetector<TrainScalar>::part_registry(),
                            read_checkpoint(result.checkpoint_path), all_part_tags());
  const auto t1 = std::chrono::steady_clock::now();
  const auto eval_out = evaluate_model(model, val_ds, cfg.resize);
  const double eval_secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  std::printf("box AP %.4f  AP50 %.4f  AP75 %.4f | mask AP %.4f | %zu dets, eval %.1fs\n",
              eval_out.box_ap.ap, eval_out.box_ap.ap50, eval_out.box_ap.ap75, eval_out.mask_ap.ap,
              eval_out.detections.size(), eval_secs);
  return 0;
}
