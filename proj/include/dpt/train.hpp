// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Training harness: deterministic data loading, the two-phase training loop
// (pretrain / finetune with partial weight transfer), run-log profiling and
// the experiment matrix runner. Single training-loop owner; per-sample
// transforms are pure functions of (sample, spec, derived seed).
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dpt/checkpoint.hpp"
#include "dpt/coco.hpp"
#include "dpt/common.hpp"
#include "dpt/detector.hpp"
#include "dpt/eval.hpp"
#include "dpt/resize.hpp"
#include "dpt/schedule.hpp"

namespace dpt {

using TrainScalar = float;

struct TrainPhaseConfig {
  Phase phase = Phase::pretrain;
  ResizeSpec resize;
  int total_batch = 8;
  BnMode bn_mode = BnMode::train;
  int sync_workers = 2;  // consulted only in sync mode
  LrPolicy lr;
  SchedulePreset preset{"P1x", 12, Phase::pretrain};
  std::string load_checkpoint;  // empty = random init
  std::set<std::string> load_parts;
  bool strict_load = true;
  std::uint64_t seed = 0;
  std::string output_dir;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;
  int pad_divisor = 32;
  std::int64_t max_iters = 0;  // 0 = run the full schedule; else cap (step-parity runs)
  DetectorConfig detector;

  void validate() const {
    if (total_batch <= 0) throw ConfigError("total_batch must be positive");
    if (phase == Phase::pretrain) {
      if (bn_mode != BnMode::train && bn_mode != BnMode::sync)
        throw ConfigError("pretrain phase pairs with train or sync BN, got '" +
                          std::string(to_string(bn_mode)) + "'");
      if (preset.phase != Phase::pretrain)
        throw ConfigError("pretrain phase requires a constant-LR preset (P1x..P4x)");
    } else {
      if (preset.phase != Phase::finetune)
        throw ConfigError("finetune phase requires a decay preset (1x, 2x)");
    }
  }
};

struct IterRecord {
  std::int64_t iter = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_rpn_obj = 0.0;
  double loss_rpn_box = 0.0;
  double loss_cls = 0.0;
  double loss_box = 0.0;
  double loss_mask = 0.0;
  double time = 0.0;       // seconds, full iteration
  double data_time = 0.0;  // seconds, loading + resize + collation
  std::int64_t batch_bytes = 0;

  nlohmann::ordered_json to_json() const {
    return {{"iter", iter},
            {"epoch", epoch},
            {"lr", lr},
            {"loss", loss},
            {"loss_rpn_obj", loss_rpn_obj},
            {"loss_rpn_box", loss_rpn_box},
            {"loss_cls", loss_cls},
            {"loss_box", loss_box},
            {"loss_mask", loss_mask},
            {"time", time},
            {"data_time", data_time},
            {"batch_bytes", batch_bytes}};
  }
  static IterRecord from_json(const nlohmann::json& j) {
    IterRecord r;
    r.iter = j.value("iter", std::int64_t{0});
    r.epoch = j.value("epoch", std::int64_t{0});
    r.lr = j.value("lr", 0.0);
    r.loss = j.value("loss", 0.0);
    r.loss_rpn_obj = j.value("loss_rpn_obj", 0.0);
    r.loss_rpn_box = j.value("loss_rpn_box", 0.0);
    r.loss_cls = j.value("loss_cls", 0.0);
    r.loss_box = j.value("loss_box", 0.0);
    r.loss_mask = j.value("loss_mask", 0.0);
    r.time = j.value("time", 0.0);
    r.data_time = j.value("data_time", 0.0);
    r.batch_bytes = j.value("batch_bytes", std::int64_t{0});
    return r;
  }
};

struct LoadedBatch {
  CollatedBatch collated;
  std::vector<GtInstances> gts;
  double data_seconds = 0.0;
  std::int64_t bytes = 0;
};

/// Deterministic epoch-shuffled loader. The per-sample stream is keyed by
/// (global_seed, epoch, dataset index), so worker scheduling or batch
/// composition can never change an individual sample's transform.
class DataLoader {
public:
  DataLoader(const Dataset& ds, ResizeSpec spec, int batch, std::uint64_t seed,
             int pad_divisor = 32)
      : ds_(&ds), spec_(std::move(spec)), batch_(batch), seed_(seed), pad_divisor_(pad_divisor) {
    if (ds.samples.empty()) throw Error("DataLoader: empty dataset");
    if (batch <= 0) throw Error("DataLoader: batch must be positive");
    start_epoch(0);
  }

  std::int64_t iters_per_epoch() const {
    return epochs_to_iters(static_cast<std::int64_t>(ds_->samples.size()), batch_, 1);
  }

  /// Artificial per-sample delay for profiler calibration tests.
  void set_inject_delay_ms(double ms) { inject_delay_ms_ = ms; }

  LoadedBatch next() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<ResizedSample> resized;
    std::vector<GtInstances> gts;
    const std::size_t take = std::min<std::size_t>(batch_, order_.size() - cursor_);
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t idx = order_[cursor_ + k];
      auto rng = sample_rng(seed_, static_cast<std::uint64_t>(epoch_), idx);
      auto [sample, plan] = resize_sample(ds_->samples[idx], spec_, rng);
      if (inject_delay_ms_ > 0.0) {
        std::this_thread::sleep_for(
            std::chrono::duration<double, std::milli>(inject_delay_ms_));
      }
      GtInstances gt;
      gt.boxes = sample.boxes;
      gt.labels = sample.labels;
      gt.masks = sample.masks;
      gt.width = plan.out_w;
      gt.height = plan.out_h;
      gts.push_back(std::move(gt));
      resized.push_back({std::move(sample), plan});
    }
    cursor_ += take;
    if (cursor_ >= order_.size()) start_epoch(epoch_ + 1);

    LoadedBatch out;
    out.collated = batch_collate(resized, pad_divisor_);
    out.gts = std::move(gts);
    out.bytes = static_cast<std::int64_t>(out.collated.pixels.data.size() * sizeof(float));
    out.data_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  std::int64_t epoch() const { return epoch_; }

private:
  void start_epoch(std::int64_t e) {
    epoch_ = e;
    cursor_ = 0;
    order_.resize(ds_->samples.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(derive_seed(seed_, 0xE90Cull, static_cast<std::uint64_t>(e)));
    for (std::size_t i = order_.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order_[i - 1], order_[j]);
    }
  }

  const Dataset* ds_;
  ResizeSpec spec_;
  int batch_;
  std::uint64_t seed_;
  int pad_divisor_;
  double inject_delay_ms_ = 0.0;
  std::int64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

struct TrainPhaseResult {
  std::string checkpoint_path;
  std::string log_path;
  std::int64_t iterations = 0;
  double final_loss = 0.0;
  std::vector<IterRecord> records;
  TransferReport transfer;  // populated when a checkpoint was loaded
};

namespace detail {

inline int phase_resolution(const ResizeSpec& spec) {
  switch (spec.strategy) {
    case ResizeStrategy::imagenet_style: return spec.base_size;
    default: return spec.max_short;
  }
}

}  // namespace detail

/// Runs one training phase end to end: build (or load) the model, iterate
/// epochs_to_iters steps with the phase's LR policy, log every iteration,
/// save the final checkpoint with metadata. Non-finite losses abort with a
/// diagnostic.
inline TrainPhaseResult train_phase(const TrainPhaseConfig& cfg, const Dataset& train_ds) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(cfg.output_dir);

  ToyDetector<TrainScalar> model(cfg.detector);
  model.init_weights(cfg.seed);
  TrainPhaseResult result;
  if (!cfg.load_checkpoint.empty()) {
    const auto ckpt = read_checkpoint(cfg.load_checkpoint);
    const auto parts = cfg.load_parts.empty() ? all_part_tags() : cfg.load_parts;
    result.transfer = load_partial<TrainScalar>(model.named_arrays(),
                                                ToyDetector<TrainScalar>::part_registry(), ckpt,
                                                parts, cfg.strict_load);
  }
  model.set_bn_mode(cfg.bn_mode);
  if (cfg.bn_mode == BnMode::sync) model.set_sync_workers(cfg.sync_workers);

  DataLoader loader(train_ds, cfg.resize, cfg.total_batch, cfg.seed, cfg.pad_divisor);
  const auto iters_per_epoch = loader.iters_per_epoch();
  auto total_iters = epochs_to_iters(static_cast<std::int64_t>(train_ds.samples.size()),
                                     cfg.total_batch, cfg.preset.epochs);
  if (cfg.max_iters > 0) total_iters = std::min(total_iters, cfg.max_iters);

  nn::SgdOptimizer<TrainScalar> opt(cfg.momentum, cfg.weight_decay);
  auto all_params = model.named_parameters();

  const auto log_path = (fs::path(cfg.output_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path);
  if (!log) throw Error("train_phase: cannot open log " + log_path);

  double final_loss = 0.0;
  for (std::int64_t it = 0; it < total_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    auto batch = loader.next();
    auto x = nhwc_to_nchw<TrainScalar>(batch.collated.pixels);

    const double lr = lr_at(cfg.lr, cfg.preset, it, iters_per_epoch);
    opt.zero_grad(all_params);
    Rng step_rng(derive_seed(cfg.seed, 0x57E9ull, static_cast<std::uint64_t>(it)));
    const auto stats = model.train_step(x, batch.gts, step_rng);
    if (!std::isfinite(stats.total)) {
      throw Error("train_phase: non-finite loss at iteration " + std::to_string(it) +
                  " (rpn_obj=" + std::to_string(stats.rpn_obj) +
                  ", rpn_box=" + std::to_string(stats.rpn_box) +
                  ", cls=" + std::to_string(stats.cls) + ", box=" + std::to_string(stats.box) +
                  ", mask=" + std::to_string(stats.mask) + "); check the learning rate");
    }
    auto trainable = model.trainable_parameters();
    nn::clip_grad_norm(trainable, cfg.grad_clip);
    opt.step(trainable, lr);

    IterRecord rec;
    rec.iter = it;
    rec.epoch = it / iters_per_epoch;
    rec.lr = lr;
    rec.loss = stats.total;
    rec.loss_rpn_obj = stats.rpn_obj;
    rec.loss_rpn_box = stats.rpn_box;
    rec.loss_cls = stats.cls;
    rec.loss_box = stats.box;
    rec.loss_mask = stats.mask;
    rec.time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.data_time = batch.data_seconds;
    rec.batch_bytes = batch.bytes;
    log << rec.to_json().dump() << "\n";
    result.records.push_back(rec);
    final_loss = stats.total;
  }
  log.flush();

  CheckpointMeta meta;
  meta.phase = to_string(cfg.phase);
  meta.schedule_preset = cfg.preset.name;
  meta.resolution = detail::phase_resolution(cfg.resize);
  meta.batch = cfg.total_batch;
  meta.seed = cfg.seed;
  meta.iterations = total_iters;
  const auto ckpt_path = (fs::path(cfg.output_dir) / "checkpoint.ckpt").string();
  write_checkpoint(make_checkpoint<TrainScalar>(model.named_arrays(),
                                                ToyDetector<TrainScalar>::part_registry(), meta),
                   ckpt_path);

  result.checkpoint_path = ckpt_path;
  result.log_path = log_path;
  result.iterations = total_iters;
  result.final_loss = final_loss;
  return result;
}

// ---- evaluation glue -------------------------------------------------------

/// Maps one detection's mask grid into an original-space raster: normalized
/// box coordinates are affine-invariant, so the grid transfers directly.
inline Mask detection_mask_to_original(const Detection& det, const Box& original_box, int img_w,
                                       int img_h) {
  Mask m(img_w, img_h);
  if (det.mask_size == 0) return m;
  const int g = det.mask_size;
  const int x_lo = std::max(0, static_cast<int>(std::floor(original_box.x1)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(original_box.y1)));
  const int x_hi = std::min(img_w, static_cast<int>(std::ceil(original_box.x2)));
  const int y_hi = std::min(img_h, static_cast<int>(std::ceil(original_box.y2)));
  const double bw = original_box.width(), bh = original_box.height();
  if (bw <= 0 || bh <= 0) return m;
  for (int y = y_lo; y < y_hi; ++y) {
    const double v = (y + 0.5 - original_box.y1) / bh;
    const int gy = std::clamp(static_cast<int>(v * g), 0, g - 1);
    for (int x = x_lo; x < x_hi; ++x) {
      const double u = (x + 0.5 - original_box.x1) / bw;
      const int gx = std::clamp(static_cast<int>(u * g), 0, g - 1);
      if (det.mask_prob[static_cast<std::size_t>(gy) * g + gx] >= 0.5f) m.at(x, y) = 1;
    }
  }
  return m;
}

struct EvalOutput {
  ApResult box_ap;
  ApResult mask_ap;
  std::vector<EvalDetection> detections;  // original coordinates
};

inline std::vector<GtImage> dataset_gt(const Dataset& ds) {
  std::vector<GtImage> gts;
  for (const auto& s : ds.samples) {
    GtImage g;
    g.image_id = s.image_id;
    g.boxes = s.boxes;
    g.labels = s.labels;
    g.masks = s.masks;
    gts.push_back(std::move(g));
  }
  return gts;
}

/// Runs the detector over a dataset with the given (deterministic) resize
/// spec, maps detections back through each sample's inverse plan and scores
/// them COCO-style against the original annotations.
inline EvalOutput evaluate_model(ToyDetector<TrainScalar>& model, const Dataset& ds,
                                 const ResizeSpec& spec, bool with_masks = true,
                                 int eval_batch = 8, std::uint64_t seed = 0) {
  EvalOutput out;
  std::vector<ResizedSample> chunk;
  std::vector<std::int64_t> ids;
  std::vector<std::pair<int, int>> orig_dims;

  const auto flush = [&]() {
    if (chunk.empty()) return;
    auto collated = batch_collate(chunk, 32);
    auto x = nhwc_to_nchw<TrainScalar>(collated.pixels);
    std::vector<std::pair<int, int>> sizes;
    for (const auto& rs : chunk) sizes.push_back({rs.plan.out_w, rs.plan.out_h});
    auto dets = model.detect(x, sizes, with_masks);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto inv = invert_plan(chunk[i].plan);
      for (const auto& d : dets[i]) {
        auto mapped = transform_boxes({d.box}, inv);
        if (mapped.boxes.empty()) continue;
        EvalDetection ed;
        ed.image_id = ids[i];
        ed.category = d.class_id;
        ed.score = d.score;
        ed.box = mapped.boxes[0];
        if (with_masks && d.mask_size > 0) {
          ed.mask = detection_mask_to_original(d, ed.box, orig_dims[i].first,
                                               orig_dims[i].second);
        }
        out.detections.push_back(std::move(ed));
      }
    }
    chunk.clear();
    ids.clear();
    orig_dims.clear();
  };

  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto rng = sample_rng(seed, 0, i);
    auto [sample, plan] = resize_sample(ds.samples[i], spec, rng);
    ids.push_back(ds.samples[i].image_id);
    orig_dims.push_back({ds.samples[i].pixels.w, ds.samples[i].pixels.h});
    chunk.push_back({std::move(sample), plan});
    if (chunk.size() == static_cast<std::size_t>(eval_batch)) flush();
  }
  flush();

  const auto gts = dataset_gt(ds);
  out.box_ap = evaluate_ap(out.detections, gts, false);
  bool have_masks = false;
  for (const auto& g : gts) have_masks = have_masks || !g.masks.empty();
  if (with_masks && have_masks) out.mask_ap = evaluate_ap(out.detections, gts, true);
  return out;
}

// ---- profiling --------------------------------------------------------------

struct ProfileReport {
  double time_per_iter = 0.0;
  double data_time = 0.0;
  std::int64_t peak_batch_bytes = 0;
  std::int64_t iters_counted = 0;
  bool warmup_excluded = false;  // first 50 iterations dropped from averages
};

/// Averages over a run log, excluding the first 50 warmup iterations when
/// the log is long enough to afford it. Peak bytes come from collated shapes.
inline ProfileReport profile(const std::vector<IterRecord>& records) {
  ProfileReport rep;
  if (records.empty()) return rep;
  const std::size_t skip = records.size() > 50 ? 50 : 0;
  rep.warmup_excluded = skip > 0;
  KahanSum time_sum, data_sum;
  for (std::size_t i = skip; i < records.size(); ++i) {
    time_sum.add(records[i].time);
    data_sum.add(records[i].data_time);
  }
  for (const auto& r : records) rep.peak_batch_bytes = std::max(rep.peak_batch_bytes, r.batch_bytes);
  rep.iters_counted = static_cast<std::int64_t>(records.size() - skip);
  rep.time_per_iter = time_sum.value() / static_cast<double>(rep.iters_counted);
  rep.data_time = data_sum.value() / static_cast<double>(rep.iters_counted);
  return rep;
}

inline std::vector<IterRecord> read_run_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_run_log: cannot open " + path);
  std::vector<IterRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      records.push_back(IterRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw IntegrityError("read_run_log: malformed line: " + std::string(e.what()));
    }
  }
  return records;
}

/// Data-pipeline-only profile: loads and resizes `samples` images with the
/// given spec (batch 1) and reports per-sample data times as a pseudo run
/// log. Used for resize-strategy timing comparisons.
inline std::vector<IterRecord> profile_data_pipeline(const Dataset& ds, const ResizeSpec& spec,
                                                     int samples, std::uint64_t seed,
                                                     double inject_delay_ms = 0.0) {
  DataLoader loader(ds, spec, 1, seed);
  loader.set_inject_delay_ms(inject_delay_ms);
  std::vector<IterRecord> records;
  for (int i = 0; i < samples; ++i) {
    auto batch = loader.next();
    IterRecord rec;
    rec.iter = i;
    rec.time = batch.data_seconds;
    rec.data_time = batch.data_seconds;
    rec.batch_bytes = batch.bytes;
    records.push_back(rec);
  }
  return records;
}

// ---- experiment matrix -------------------------------------------------------

struct MatrixEntry {
  std::string name;
  std::optional<TrainPhaseConfig> pretrain;
  TrainPhaseConfig finetune;
};

struct MatrixRow {
  std::string name;
  bool ok = false;
  std::string error;
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
  double mask_ap = 0.0;
  double time_per_iter = 0.0;
  double data_time = 0.0;
};

/// Executes (pretrain?, finetune) pairs and tabulates AP and timing per
/// entry. Failures are captured per cell; the matrix keeps going.
inline std::vector<MatrixRow> run_experiment_matrix(const std::vector<MatrixEntry>& entries,
                                                    const Dataset& train_ds,
                                                    const Dataset& val_ds) {
  namespace fs = std::filesystem;
  std::vector<MatrixRow> rows;
  for (const auto& entry : entries) {
    MatrixRow row;
    row.name = entry.name;
    try {
      TrainPhaseConfig ft = entry.finetune;
      if (entry.pretrain.has_value()) {
        auto pre = *entry.pretrain;
        pre.output_dir = (fs::path(ft.output_dir) / "pretrain").string();
        const auto pre_result = train_phase(pre, train_ds);
        if (ft.load_checkpoint.empty()) {
          ft.load_checkpoint = pre_result.checkpoint_path;
          if (ft.load_parts.empty()) ft.load_parts = all_part_tags();
        }
      }
      auto ft_dir = ft;
      ft_dir.output_dir = (fs::path(ft.output_dir) / "finetune").string();
      const auto result = train_phase(ft_dir, train_ds);

      ToyDetector<TrainScalar> model(ft.detector);
      model.init_weights(ft.seed);
      load_partial<TrainScalar>(model.named_arrays(),
                                ToyDetector<TrainScalar>::part_registry(),
                                read_checkpoint(result.checkpoint_path), all_part_tags());
      ResizeSpec eval_spec = ft.resize;
      if (eval_spec.strategy == ResizeStrategy::multi_scale_keep_ratio) {
        eval_spec.strategy = ResizeStrategy::keep_ratio;  // deterministic eval scale
      }
      const auto eval_out = evaluate_model(model, val_ds, eval_spec);
      const auto prof = profile(result.records);
      row.ok = true;
      row.ap = eval_out.box_ap.ap;
      row.ap50 = eval_out.box_ap.ap50;
      row.ap75 = eval_out.box_ap.ap75;
      row.mask_ap = eval_out.mask_ap.ap;
      row.time_per_iter = prof.time_per_iter;
      row.data_time = prof.data_time;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dpt
