// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic shapes dataset: colored circles, squares and triangles on a
// noisy background. Every instance mask is exact by construction (pixel
// centers inside the analytic shape) and every box equals its mask's
// bounding box. Deterministic under the spec seed.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpt/coco.hpp"
#include "dpt/common.hpp"
#include "dpt/geometry.hpp"
#include "dpt/resize.hpp"

namespace dpt {

enum class ShapeKind { circle = 1, square = 2, triangle = 3 };

struct SyntheticSpec {
  int num_images = 100;
  int image_size = 96;
  int min_shapes = 1;
  int max_shapes = 3;
  double min_radius_fraction = 0.08;  // of image_size
  double max_radius_fraction = 0.24;
  std::vector<ShapeKind> kinds{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
  std::uint64_t seed = 0;
  std::int64_t first_image_id = 1;

  void validate() const {
    if (num_images < 0) throw Error("SyntheticSpec: num_images must be >= 0");
    if (image_size < 16) throw Error("SyntheticSpec: image_size must be >= 16");
    if (min_shapes < 0 || max_shapes < min_shapes)
      throw Error("SyntheticSpec: bad shapes_per_image range");
    if (min_radius_fraction <= 0.0 || max_radius_fraction < min_radius_fraction ||
        max_radius_fraction > 0.4)
      throw Error("SyntheticSpec: bad radius fraction range");
    if (kinds.empty()) throw Error("SyntheticSpec: kinds must be non-empty");
  }
};

/// Rasterizes one shape on a size x size grid: a pixel belongs to the mask
/// iff its center lies inside the analytic shape (boundary inclusive).
inline Mask raster_shape(ShapeKind kind, double cx, double cy, double r, int size) {
  Mask m(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      switch (kind) {
        case ShapeKind::circle:
          inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
          break;
        case ShapeKind::square:
          inside = std::abs(px - cx) <= r && std::abs(py - cy) <= r;
          break;
        case ShapeKind::triangle: {
          // isoceles triangle: apex (cx, cy - r), base corners (cx -+ r, cy + r)
          const std::array<std::array<double, 2>, 3> v = {
              {{cx, cy - r}, {cx - r, cy + r}, {cx + r, cy + r}}};
          inside = true;
          for (int e = 0; e < 3 && inside; ++e) {
            const auto& a = v[e];
            const auto& b = v[(e + 1) % 3];
            const double cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
            inside = cross >= 0.0;  // vertices wound counter-clockwise in image coords
          }
          break;
        }
      }
      if (inside) m.at(x, y) = 1;
    }
  }
  return m;
}

namespace detail {

inline std::array<float, 3> shape_base_color(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle: return {0.85f, 0.25f, 0.25f};
    case ShapeKind::square: return {0.25f, 0.85f, 0.25f};
    case ShapeKind::triangle: return {0.30f, 0.35f, 0.90f};
  }
  return {1.0f, 1.0f, 1.0f};
}

}  // namespace detail

/// One synthetic image with exact boxes/masks/labels. Deterministic in
/// (spec.seed, index).
inline ImageSample generate_shapes_sample(const SyntheticSpec& spec, int index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x5A7Dull, static_cast<std::uint64_t>(index)));
  const int size = spec.image_size;

  ImageSample s;
  s.image_id = spec.first_image_id + index;
  s.pixels = Image(size, size, 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        s.pixels.at(x, y, c) = static_cast<float>(0.12 + rng.uniform(-0.04, 0.04));

  const int want = static_cast<int>(rng.uniform_int(spec.min_shapes, spec.max_shapes));
  for (int k = 0; k < want; ++k) {
    // rejection-sample a placement whose box clears the existing ones
    for (int attempt = 0; attempt < 24; ++attempt) {
      const auto kind =
          spec.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.kinds.size()) - 1))];
      const double r = rng.uniform(spec.min_radius_fraction, spec.max_radius_fraction) * size;
      const double margin = r + 2.0;
      const double cx = rng.uniform(margin, size - margin);
      const double cy = rng.uniform(margin, size - margin);
      const Box candidate{cx - r, cy - r, cx + r, cy + r};
      bool clear = true;
      for (const auto& b : s.boxes) {
        const Box inflated{b.x1 - 2, b.y1 - 2, b.x2 + 2, b.y2 + 2};
        if (box_iou(candidate, inflated) > 0.0) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;

      Mask m = raster_shape(kind, cx, cy, r, size);
      const auto bbox = mask_bbox(m);
      if (!bbox) break;
      auto color = detail::shape_base_color(kind);
      const float jitter = static_cast<float>(rng.uniform(-0.08, 0.08));
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          if (!m.at(x, y)) continue;
          for (int c = 0; c < 3; ++c) {
            const float v = color[c] + jitter + static_cast<float>(rng.uniform(-0.02, 0.02));
            s.pixels.at(x, y, c) = std::clamp(v, 0.0f, 1.0f);
          }
        }
      }
      s.boxes.push_back(*bbox);  // box equals the mask bounding box exactly
      s.masks.push_back(std::move(m));
      s.labels.push_back(static_cast<int>(kind));
      break;
    }
  }
  return s;
}

inline Dataset generate_shapes_samples(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.categories = {{1, "circle"}, {2, "square"}, {3, "triangle"}};
  ds.samples.reserve(static_cast<std::size_t>(spec.num_images));
  for (int i = 0; i < spec.num_images; ++i) ds.samples.push_back(generate_shapes_sample(spec, i));
  return ds;
}

/// Generates and writes the dataset (images/ + annotations.json) under dir.
inline Dataset generate_shapes_dataset(const SyntheticSpec& spec, const std::string& dir) {
  auto ds = generate_shapes_samples(spec);
  write_dataset(ds, dir);
  return ds;
}

}  // namespace dpt
