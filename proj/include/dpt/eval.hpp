// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// COCO-style average precision: IoU thresholds 0.50:0.05:0.95, all-point
// interpolation sampled at 101 recall points, small/medium/large area
// buckets. Works on boxes or on instance masks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dpt/common.hpp"
#include "dpt/geometry.hpp"

namespace dpt {

struct EvalDetection {
  std::int64_t image_id = 0;
  int category = 0;
  double score = 0.0;
  Box box;     // original-image coordinates
  Mask mask;   // optional original-space raster (for mask AP)
};

struct GtImage {
  std::int64_t image_id = 0;
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<Mask> masks;  // empty or one per box
};

struct ApResult {
  double ap = 0.0;      // mean over IoU 0.50:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  bool empty_gt = false;  // warning: defined as AP 0
  std::map<int, double> per_class;  // at the full threshold sweep, bucket "all"
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

inline double mask_iou(const Mask& a, const Mask& b) {
  if (a.w != b.w || a.h != b.h) throw Error("mask_iou: mismatched mask dims");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool va = a.data[i] != 0, vb = b.data[i] != 0;
    inter += (va && vb);
    uni += (va || vb);
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace detail {

struct AreaRange {
  double lo, hi;
};

inline const std::vector<std::pair<std::string, AreaRange>>& coco_area_ranges() {
  static const std::vector<std::pair<std::string, AreaRange>> ranges = {
      {"all", {0.0, 1e10}},
      {"small", {0.0, 32.0 * 32.0}},
      {"medium", {32.0 * 32.0, 96.0 * 96.0}},
      {"large", {96.0 * 96.0, 1e10}},
  };
  return ranges;
}

struct FlatGt {
  std::int64_t image_id;
  std::size_t index_in_image;
  double area;
};

struct FlatDet {
  std::size_t det_index;
  double score;
  std::int64_t image_id;
  double area;
};

/// AP for one (category, IoU threshold, area range); nullopt when the
/// category has no non-ignored ground truth in the range.
///
/// Matching rule: detections in descending score order each take the
/// unmatched ground truth with the highest IoU >= threshold; non-ignored
/// ground truth always wins over ignored (out-of-range) ground truth, and a
/// detection that can only match ignored ground truth is itself ignored.
inline std::optional<double> ap_single(
    const std::vector<EvalDetection>& dets, const std::vector<GtImage>& gts, int category,
    double iou_thresh, const AreaRange& range, bool use_masks, int max_dets) {
  struct ImageGt {
    const GtImage* img = nullptr;
    std::vector<std::size_t> order;  // positions of this category, non-ignored first
    std::vector<bool> ignored;       // by position in `order`
    std::vector<bool> matched;
  };
  std::map<std::int64_t, ImageGt> by_image;
  std::size_t npig = 0;
  for (const auto& img : gts) {
    auto& slot = by_image[img.image_id];
    slot.img = &img;
    std::vector<std::size_t> keep, ignore;
    for (std::size_t g = 0; g < img.boxes.size(); ++g) {
      if (img.labels[g] != category) continue;
      const double area = use_masks && !img.masks.empty()
                              ? static_cast<double>(img.masks[g].count())
                              : img.boxes[g].area();
      const bool is_ignored = area < range.lo || area >= range.hi;
      (is_ignored ? ignore : keep).push_back(g);
    }
    npig += keep.size();
    slot.order = keep;
    slot.order.insert(slot.order.end(), ignore.begin(), ignore.end());
    slot.ignored.assign(keep.size(), false);
    slot.ignored.insert(slot.ignored.end(), ignore.size(), true);
    slot.matched.assign(slot.order.size(), false);
  }
  if (npig == 0) return std::nullopt;

  // Detections of this category, globally sorted by score (deterministic
  // tie-break on image id then insertion order), capped per image.
  std::vector<FlatDet> flat;
  std::map<std::int64_t, int> per_image_count;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (dets[d].category != category) continue;
    flat.push_back({d, dets[d].score, dets[d].image_id,
                    use_masks ? static_cast<double>(dets[d].mask.count())
                              : dets[d].box.area()});
  }
  std::stable_sort(flat.begin(), flat.end(), [](const FlatDet& a, const FlatDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.det_index < b.det_index;
  });
  std::vector<FlatDet> capped;
  for (const auto& d : flat) {
    if (per_image_count[d.image_id] >= max_dets) continue;
    ++per_image_count[d.image_id];
    capped.push_back(d);
  }

  std::vector<int> det_state(capped.size(), 0);  // 0 = FP, 1 = TP, 2 = ignored
  for (std::size_t k = 0; k < capped.size(); ++k) {
    const auto& det = dets[capped[k].det_index];
    const auto it = by_image.find(det.image_id);
    int best_j = -1;
    double best_iou = 0.0;
    if (it != by_image.end()) {
      auto& slot = it->second;
      for (std::size_t j = 0; j < slot.order.size(); ++j) {
        if (slot.matched[j]) continue;
        // entering the ignored tail with a real match in hand: stop looking
        if (best_j >= 0 && !slot.ignored[best_j] && slot.ignored[j]) break;
        const std::size_t g = slot.order[j];
        const double iou = use_masks ? mask_iou(det.mask, slot.img->masks[g])
                                     : box_iou(det.box, slot.img->boxes[g]);
        if (iou >= iou_thresh && iou > best_iou) {
          best_iou = iou;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0) {
        slot.matched[best_j] = true;
        det_state[k] = slot.ignored[best_j] ? 2 : 1;
        continue;
      }
    }
    // unmatched: out-of-range detections are ignored rather than penalized
    const bool out_of_range = capped[k].area < range.lo || capped[k].area >= range.hi;
    det_state[k] = out_of_range ? 2 : 0;
  }

  // Precision/recall accumulation and 101-point interpolation.
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (std::size_t k = 0; k < capped.size(); ++k) {
    if (det_state[k] == 2) continue;
    if (det_state[k] == 1) ++tp; else ++fp;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(npig));
  }
  // envelope: max precision to the right
  for (std::size_t k = precision.size(); k-- > 1;) {
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  }
  double ap = 0.0;
  std::size_t k = 0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double r = ri / 100.0;
    while (k < recall.size() && recall[k] < r) ++k;
    if (k < recall.size()) ap += precision[k];
  }
  return ap / 101.0;
}

inline double mean_over_classes(const std::vector<std::optional<double>>& aps) {
  double sum = 0.0;
  int n = 0;
  for (const auto& ap : aps) {
    if (ap.has_value()) {
      sum += *ap;
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace detail

/// Full COCO-style sweep. Classes are taken from the ground truth; classes
/// without ground truth are excluded from the mean. Empty ground truth is
/// defined as AP 0 with the empty_gt warning set.
inline ApResult evaluate_ap(const std::vector<EvalDetection>& dets,
                            const std::vector<GtImage>& gts, bool use_masks = false,
                            int max_dets = 100) {
  ApResult res;
  std::vector<int> classes;
  for (const auto& img : gts)
    for (const int l : img.labels)
      if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) {
    res.empty_gt = true;
    return res;
  }

  const auto thresholds = coco_iou_thresholds();
  const auto& ranges = detail::coco_area_ranges();
  std::map<std::string, std::vector<std::optional<double>>> bucket_aps;
  std::vector<std::optional<double>> ap50s, ap75s;

  for (const auto& [bucket, range] : ranges) {
    for (const int cls : classes) {
      double sum = 0.0;
      int n = 0;
      bool any = false;
      for (const double t : thresholds) {
        const auto ap = detail::ap_single(dets, gts, cls, t, range, use_masks, max_dets);
        if (ap.has_value()) {
          sum += *ap;
          ++n;
          any = true;
        }
        if (bucket == "all") {
          if (t == 0.5) ap50s.push_back(ap);
          if (t == 0.75) ap75s.push_back(ap);
        }
      }
      bucket_aps[bucket].push_back(any ? std::optional<double>(sum / n) : std::nullopt);
      if (bucket == "all" && any) res.per_class[cls] = sum / n;
    }
  }

  res.ap = detail::mean_over_classes(bucket_aps["all"]);
  res.ap50 = detail::mean_over_classes(ap50s);
  res.ap75 = detail::mean_over_classes(ap75s);
  res.ap_small = detail::mean_over_classes(bucket_aps["small"]);
  res.ap_medium = detail::mean_over_classes(bucket_aps["medium"]);
  res.ap_large = detail::mean_over_classes(bucket_aps["large"]);
  return res;
}

/// AP at a single IoU threshold over the "all" bucket (mean over classes).
inline double evaluate_ap_at(const std::vector<EvalDetection>& dets,
                             const std::vector<GtImage>& gts, double iou_thresh,
                             bool use_masks = false, int max_dets = 100) {
  std::vector<int> classes;
  for (const auto& img : gts)
    for (const int l : img.labels)
      if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
  std::sort(classes.begin(), classes.end());
  std::vector<std::optional<double>> aps;
  for (const int cls : classes) {
    aps.push_back(detail::ap_single(dets, gts, cls, iou_thresh, {0.0, 1e10}, use_masks, max_dets));
  }
  return detail::mean_over_classes(aps);
}

}  // namespace dpt
