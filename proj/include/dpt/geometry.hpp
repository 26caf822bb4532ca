// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Boxes, instance masks, images and the ResizePlan that ties them together.
// The plan is the single source of truth for annotation geometry: pixels,
// boxes and masks all go through the same scale -> crop -> pad record, and
// detections come back through its inverse.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "dpt/common.hpp"

namespace dpt {

/// Axis-aligned box, absolute pixels, corner format (x1,y1,x2,y2).
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
};

inline bool box_valid_for(const Box& b, double w, double h) {
  return b.x1 >= 0.0 && b.y1 >= 0.0 && b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= w && b.y2 <= h;
}

inline double box_iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Invertible record of one resize: scale first, then crop, then bottom-right
/// zero pad. Point map: x' = x * scale_x - crop_x (padding never moves
/// coordinates). Strategies always produce integral crop offsets; inverse
/// plans may carry fractional ones and are only used for coordinate math.
struct ResizePlan {
  double scale_x = 1.0, scale_y = 1.0;
  double crop_x = 0.0, crop_y = 0.0;
  int pad_right = 0, pad_bottom = 0;
  int in_w = 0, in_h = 0;
  int out_w = 0, out_h = 0;

  double map_x(double x) const { return x * scale_x - crop_x; }
  double map_y(double y) const { return y * scale_y - crop_y; }

  /// Dimensions of the intermediate scaled image (before crop/pad).
  int scaled_w() const { return static_cast<int>(std::llround(in_w * scale_x)); }
  int scaled_h() const { return static_cast<int>(std::llround(in_h * scale_y)); }
};

inline ResizePlan identity_plan(int w, int h) {
  ResizePlan p;
  p.in_w = p.out_w = w;
  p.in_h = p.out_h = h;
  return p;
}

/// Inverse plan: composing forward and inverse maps any in-bounds point to
/// itself. Zero scales are rejected.
inline ResizePlan invert_plan(const ResizePlan& p) {
  if (p.scale_x == 0.0 || p.scale_y == 0.0) throw Error("invert_plan: zero scale");
  ResizePlan inv;
  inv.scale_x = 1.0 / p.scale_x;
  inv.scale_y = 1.0 / p.scale_y;
  inv.crop_x = -p.crop_x / p.scale_x;
  inv.crop_y = -p.crop_y / p.scale_y;
  inv.in_w = p.out_w;
  inv.in_h = p.out_h;
  inv.out_w = p.in_w;
  inv.out_h = p.in_h;
  return inv;
}

struct BoxTransformResult {
  std::vector<Box> boxes;                 // surviving boxes, clipped to out_size
  std::vector<std::size_t> kept;          // indices into the input list
  std::vector<std::size_t> dropped;       // indices whose clipped w or h < 1 px
};

/// Scales corners, shifts by the crop offset and clips to the output frame.
/// A box is dropped iff its clipped width or height falls below 1 px.
inline BoxTransformResult transform_boxes(const std::vector<Box>& boxes, const ResizePlan& plan) {
  BoxTransformResult res;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    Box b;
    b.x1 = std::clamp(plan.map_x(boxes[i].x1), 0.0, static_cast<double>(plan.out_w));
    b.y1 = std::clamp(plan.map_y(boxes[i].y1), 0.0, static_cast<double>(plan.out_h));
    b.x2 = std::clamp(plan.map_x(boxes[i].x2), 0.0, static_cast<double>(plan.out_w));
    b.y2 = std::clamp(plan.map_y(boxes[i].y2), 0.0, static_cast<double>(plan.out_h));
    if (b.width() < 1.0 || b.height() < 1.0) {
      res.dropped.push_back(i);
    } else {
      res.boxes.push_back(b);
      res.kept.push_back(i);
    }
  }
  return res;
}

/// Binary instance mask aligned to an image's pixel grid.
struct Mask {
  int w = 0, h = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int width, int height) : w(width), h(height), data(static_cast<std::size_t>(width) * height, 0) {}

  std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * w + x]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
  }
};

/// Tight bounds of the set pixels in corner format, or nullopt when empty.
inline std::optional<Box> mask_bbox(const Mask& m) {
  int minx = m.w, miny = m.h, maxx = -1, maxy = -1;
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(x, y)) continue;
      minx = std::min(minx, x);
      miny = std::min(miny, y);
      maxx = std::max(maxx, x);
      maxy = std::max(maxy, y);
    }
  }
  if (maxx < 0) return std::nullopt;
  return Box{static_cast<double>(minx), static_cast<double>(miny),
             static_cast<double>(maxx + 1), static_cast<double>(maxy + 1)};
}

/// Applies the plan geometry to one mask with nearest-neighbor sampling.
/// Pad regions are zero.
inline Mask transform_mask(const Mask& m, const ResizePlan& plan) {
  Mask out(plan.out_w, plan.out_h);
  if (m.w == 0 || m.h == 0) return out;
  const int sw = plan.scaled_w();
  const int sh = plan.scaled_h();
  for (int y = 0; y < plan.out_h; ++y) {
    const double ys = y + plan.crop_y;
    if (ys >= sh) continue;
    int sy = static_cast<int>(std::llround((ys + 0.5) / plan.scale_y - 0.5));
    sy = std::clamp(sy, 0, m.h - 1);
    for (int x = 0; x < plan.out_w; ++x) {
      const double xs = x + plan.crop_x;
      if (xs >= sw) continue;
      int sx = static_cast<int>(std::llround((xs + 0.5) / plan.scale_x - 0.5));
      sx = std::clamp(sx, 0, m.w - 1);
      out.at(x, y) = m.at(sx, sy);
    }
  }
  return out;
}

inline std::vector<Mask> transform_masks(const std::vector<Mask>& masks, const ResizePlan& plan) {
  std::vector<Mask> out;
  out.reserve(masks.size());
  for (const auto& m : masks) out.push_back(transform_mask(m, plan));
  return out;
}

/// H x W x C image of normalized intensities, row-major, channel innermost.
struct Image {
  int w = 0, h = 0, c = 0;
  std::vector<float> data;

  Image() = default;
  Image(int width, int height, int channels)
      : w(width), h(height), c(channels),
        data(static_cast<std::size_t>(width) * height * channels, 0.0f) {}

  float at(int x, int y, int ch) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  float& at(int x, int y, int ch) {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
};

/// Renders the plan on pixel data: bilinear resample of the scaled region,
/// zeros in the pad region. Sampling is pixel-center aligned so the raster
/// agrees with the coordinate map used for boxes.
inline Image apply_plan_bilinear(const Image& img, const ResizePlan& plan) {
  Image out(plan.out_w, plan.out_h, img.c);
  const int sw = plan.scaled_w();
  const int sh = plan.scaled_h();
  for (int y = 0; y < plan.out_h; ++y) {
    const double ys = y + plan.crop_y;
    if (ys >= sh) continue;
    double fy = (ys + 0.5) / plan.scale_y - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(img.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < plan.out_w; ++x) {
      const double xs = x + plan.crop_x;
      if (xs >= sw) continue;
      double fx = (xs + 0.5) / plan.scale_x - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(img.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < img.c; ++ch) {
        const double v00 = img.at(x0, y0, ch);
        const double v10 = img.at(x1, y0, ch);
        const double v01 = img.at(x0, y1, ch);
        const double v11 = img.at(x1, y1, ch);
        const double v = v00 * (1 - wx) * (1 - wy) + v10 * wx * (1 - wy) +
                         v01 * (1 - wx) * wy + v11 * wx * wy;
        out.at(x, y, ch) = static_cast<float>(v);
      }
    }
  }
  return out;
}

}  // namespace dpt
