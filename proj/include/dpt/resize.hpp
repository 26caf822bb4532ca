// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// The four resizing strategies of the data pipeline. Every strategy is a
// pure function of (sample, spec, per-sample seed) and returns the resized
// sample together with the ResizePlan that produced it.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpt/common.hpp"
#include "dpt/geometry.hpp"
#include "dpt/tensor.hpp"

namespace dpt {

enum class ResizeStrategy { imagenet_style, stitcher_style, keep_ratio, multi_scale_keep_ratio };

inline const char* to_string(ResizeStrategy s) {
  switch (s) {
    case ResizeStrategy::imagenet_style: return "imagenet_style";
    case ResizeStrategy::stitcher_style: return "stitcher_style";
    case ResizeStrategy::keep_ratio: return "keep_ratio";
    case ResizeStrategy::multi_scale_keep_ratio: return "multi_scale_keep_ratio";
  }
  return "?";
}

inline ResizeStrategy parse_resize_strategy(const std::string& s) {
  if (s == "imagenet_style") return ResizeStrategy::imagenet_style;
  if (s == "stitcher_style") return ResizeStrategy::stitcher_style;
  if (s == "keep_ratio") return ResizeStrategy::keep_ratio;
  if (s == "multi_scale_keep_ratio") return ResizeStrategy::multi_scale_keep_ratio;
  throw ConfigError("unknown resize strategy '" + s +
                    "' (allowed: imagenet_style, stitcher_style, keep_ratio, multi_scale_keep_ratio)");
}

struct ResizeSpec {
  ResizeStrategy strategy = ResizeStrategy::keep_ratio;
  int base_size = 448;                       // L, imagenet_style target square
  std::pair<double, double> alpha_range{0.8, 1.2};
  int divide_factor = 1;                     // n, stitcher_style
  int max_long = 1333;
  int max_short = 800;
  std::vector<int> short_edge_choices;       // multi_scale_keep_ratio
};

/// An image with absolute-pixel boxes, optional per-instance masks and class
/// labels; the unit flowing through the data pipeline.
struct ImageSample {
  Image pixels;
  std::vector<Box> boxes;
  std::vector<Mask> masks;   // empty or one per box
  std::vector<int> labels;
  std::int64_t image_id = 0;

  void validate() const {
    if (pixels.w <= 0 || pixels.h <= 0) throw Error("ImageSample: zero-area image");
    if (labels.size() != boxes.size()) throw Error("ImageSample: labels/boxes count mismatch");
    if (!masks.empty() && masks.size() != boxes.size())
      throw Error("ImageSample: masks/boxes count mismatch");
    for (const auto& b : boxes) {
      if (!box_valid_for(b, pixels.w, pixels.h)) throw Error("ImageSample: box out of bounds");
    }
    for (const auto& m : masks) {
      if (m.w != pixels.w || m.h != pixels.h) throw Error("ImageSample: mask dims mismatch");
    }
  }
};

namespace detail {

/// Applies a finished plan to a whole sample: bilinear pixels, box clip/drop,
/// nearest-neighbor masks, label filtering.
inline ImageSample apply_plan_to_sample(const ImageSample& s, const ResizePlan& plan) {
  ImageSample out;
  out.image_id = s.image_id;
  out.pixels = apply_plan_bilinear(s.pixels, plan);
  auto tb = transform_boxes(s.boxes, plan);
  out.boxes = std::move(tb.boxes);
  out.labels.reserve(tb.kept.size());
  for (auto i : tb.kept) out.labels.push_back(s.labels[i]);
  if (!s.masks.empty()) {
    out.masks.reserve(tb.kept.size());
    for (auto i : tb.kept) out.masks.push_back(transform_mask(s.masks[i], plan));
  }
  return out;
}

inline double keep_ratio_scale(int w, int h, int max_long, int max_short) {
  const double long_edge = std::max(w, h);
  const double short_edge = std::min(w, h);
  return std::min(max_long / long_edge, max_short / short_edge);
}

/// Pure-scale plan with effective per-axis factors out/in, so that applying
/// the plan reproduces out_size exactly.
inline ResizePlan scale_plan(int in_w, int in_h, int out_w, int out_h) {
  ResizePlan p;
  p.in_w = in_w;
  p.in_h = in_h;
  p.out_w = out_w;
  p.out_h = out_h;
  p.scale_x = static_cast<double>(out_w) / in_w;
  p.scale_y = static_cast<double>(out_h) / in_h;
  return p;
}

}  // namespace detail

/// Resize to a jittered square (round(alpha*L) per side), then random-crop or
/// bottom-right zero-pad to exactly (L, L). Draw order: alpha, crop_x, crop_y.
inline std::pair<ImageSample, ResizePlan> imagenet_style_resize(const ImageSample& sample,
                                                                const ResizeSpec& spec, Rng& rng) {
  if (spec.strategy != ResizeStrategy::imagenet_style)
    throw Error("imagenet_style_resize: spec.strategy mismatch");
  sample.validate();
  const auto [lo, hi] = spec.alpha_range;
  if (lo <= 0.0) throw Error("imagenet_style_resize: alpha_range lower bound must be > 0");
  if (lo >= hi) throw Error("imagenet_style_resize: alpha_range must satisfy lo < hi");
  if (spec.base_size <= 0) throw Error("imagenet_style_resize: base_size must be positive");

  const int L = spec.base_size;
  const double alpha = rng.uniform(lo, hi);
  const int scaled = std::max<int>(1, static_cast<int>(std::llround(alpha * L)));

  ResizePlan p;
  p.in_w = sample.pixels.w;
  p.in_h = sample.pixels.h;
  p.out_w = L;
  p.out_h = L;
  p.scale_x = static_cast<double>(scaled) / sample.pixels.w;
  p.scale_y = static_cast<double>(scaled) / sample.pixels.h;
  if (scaled > L) {
    p.crop_x = static_cast<double>(rng.uniform_int(0, scaled - L));
    p.crop_y = static_cast<double>(rng.uniform_int(0, scaled - L));
  } else if (scaled < L) {
    p.pad_right = L - scaled;
    p.pad_bottom = L - scaled;
  }
  return {detail::apply_plan_to_sample(sample, p), p};
}

/// Isotropic scale bounded by the (max_long, max_short) caps.
inline std::pair<ImageSample, ResizePlan> keep_ratio_resize(const ImageSample& sample,
                                                            const ResizeSpec& spec) {
  if (spec.strategy != ResizeStrategy::keep_ratio)
    throw Error("keep_ratio_resize: spec.strategy mismatch");
  sample.validate();
  if (spec.max_long <= 0 || spec.max_short <= 0)
    throw Error("keep_ratio_resize: max edges must be positive");
  const double s = detail::keep_ratio_scale(sample.pixels.w, sample.pixels.h, spec.max_long, spec.max_short);
  const int out_w = std::max<int>(1, static_cast<int>(std::llround(sample.pixels.w * s)));
  const int out_h = std::max<int>(1, static_cast<int>(std::llround(sample.pixels.h * s)));
  const auto p = detail::scale_plan(sample.pixels.w, sample.pixels.h, out_w, out_h);
  return {detail::apply_plan_to_sample(sample, p), p};
}

/// Keep-ratio resize to (max_long, max_short), then both dimensions divided
/// by n with round-half-up. The plan carries the composed scale.
inline std::pair<ImageSample, ResizePlan> stitcher_style_resize(const ImageSample& sample,
                                                                const ResizeSpec& spec) {
  if (spec.strategy != ResizeStrategy::stitcher_style)
    throw Error("stitcher_style_resize: spec.strategy mismatch");
  sample.validate();
  if (spec.divide_factor < 1) throw Error("stitcher_style_resize: divide_factor must be >= 1");
  if (spec.max_long <= 0 || spec.max_short <= 0)
    throw Error("stitcher_style_resize: max edges must be positive");
  const double s = detail::keep_ratio_scale(sample.pixels.w, sample.pixels.h, spec.max_long, spec.max_short);
  const int w1 = std::max<int>(1, static_cast<int>(std::llround(sample.pixels.w * s)));
  const int h1 = std::max<int>(1, static_cast<int>(std::llround(sample.pixels.h * s)));
  const int out_w = std::max<int>(1, static_cast<int>(std::llround(static_cast<double>(w1) / spec.divide_factor)));
  const int out_h = std::max<int>(1, static_cast<int>(std::llround(static_cast<double>(h1) / spec.divide_factor)));
  const auto p = detail::scale_plan(sample.pixels.w, sample.pixels.h, out_w, out_h);
  return {detail::apply_plan_to_sample(sample, p), p};
}

/// Picks one short-edge target uniformly, then keep-ratio resize with the
/// long edge capped at max_long.
inline std::pair<ImageSample, ResizePlan> multi_scale_keep_ratio_resize(const ImageSample& sample,
                                                                        const ResizeSpec& spec,
                                                                        Rng& rng) {
  if (spec.strategy != ResizeStrategy::multi_scale_keep_ratio)
    throw Error("multi_scale_keep_ratio_resize: spec.strategy mismatch");
  sample.validate();
  if (spec.short_edge_choices.empty())
    throw Error("multi_scale_keep_ratio_resize: short_edge_choices must be non-empty");
  if (spec.max_long <= 0) throw Error("multi_scale_keep_ratio_resize: max_long must be positive");
  const auto idx = rng.uniform_int(0, static_cast<std::int64_t>(spec.short_edge_choices.size()) - 1);
  const int target = spec.short_edge_choices[static_cast<std::size_t>(idx)];
  if (target <= 0) throw Error("multi_scale_keep_ratio_resize: short edge targets must be positive");
  const double long_edge = std::max(sample.pixels.w, sample.pixels.h);
  const double short_edge = std::min(sample.pixels.w, sample.pixels.h);
  const double s = std::min(target / short_edge, spec.max_long / long_edge);
  const int out_w = std::max<int>(1, static_cast<int>(std::llround(sample.pixels.w * s)));
  const int out_h = std::max<int>(1, static_cast<int>(std::llround(sample.pixels.h * s)));
  const auto p = detail::scale_plan(sample.pixels.w, sample.pixels.h, out_w, out_h);
  return {detail::apply_plan_to_sample(sample, p), p};
}

/// Dispatch on spec.strategy. rng is only consulted by the random strategies.
inline std::pair<ImageSample, ResizePlan> resize_sample(const ImageSample& sample,
                                                        const ResizeSpec& spec, Rng& rng) {
  switch (spec.strategy) {
    case ResizeStrategy::imagenet_style: return imagenet_style_resize(sample, spec, rng);
    case ResizeStrategy::stitcher_style: return stitcher_style_resize(sample, spec);
    case ResizeStrategy::keep_ratio: return keep_ratio_resize(sample, spec);
    case ResizeStrategy::multi_scale_keep_ratio: return multi_scale_keep_ratio_resize(sample, spec, rng);
  }
  throw Error("resize_sample: bad strategy");
}

struct ResizedSample {
  ImageSample sample;
  ResizePlan plan;
};

struct CollatedBatch {
  Tensor<float> pixels;            // N x H x W x C, bottom-right zero padded
  std::vector<ResizePlan> plans;   // one per sample
};

/// Stacks post-resize samples into one batch tensor. Samples are bottom-right
/// zero-padded to the per-batch max dims rounded up to pad_divisor.
inline CollatedBatch batch_collate(const std::vector<ResizedSample>& samples, int pad_divisor = 32) {
  if (samples.empty()) throw Error("batch_collate: empty batch");
  if (pad_divisor < 1) throw Error("batch_collate: pad_divisor must be >= 1");
  const int c = samples[0].sample.pixels.c;
  int max_w = 0, max_h = 0;
  for (const auto& s : samples) {
    if (s.sample.pixels.c != c) throw Error("batch_collate: mixed channel counts");
    max_w = std::max(max_w, s.sample.pixels.w);
    max_h = std::max(max_h, s.sample.pixels.h);
  }
  const auto round_up = [pad_divisor](int v) { return ((v + pad_divisor - 1) / pad_divisor) * pad_divisor; };
  const int bw = round_up(max_w);
  const int bh = round_up(max_h);

  CollatedBatch out;
  out.pixels = Tensor<float>({static_cast<std::int64_t>(samples.size()), bh, bw, c});
  out.plans.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& img = samples[i].sample.pixels;
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        for (int ch = 0; ch < c; ++ch)
          out.pixels.at4(static_cast<std::int64_t>(i), y, x, ch) = img.at(x, y, ch);
    out.plans.push_back(samples[i].plan);
  }
  return out;
}

}  // namespace dpt
