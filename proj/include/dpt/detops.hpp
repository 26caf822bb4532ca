// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Detection building blocks: anchors, box deltas, NMS, RoIAlign and the
// standard losses, each with an explicit backward where training needs one.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dpt/geometry.hpp"
#include "dpt/tensor.hpp"

namespace dpt::nn {

/// One square anchor per (cell, size); row-major over (y, x, size).
inline std::vector<Box> make_anchors(int fh, int fw, int stride,
                                     const std::vector<double>& sizes) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(fh) * fw * sizes.size());
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (const double s : sizes) {
        anchors.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
    }
  }
  return anchors;
}

struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

inline BoxDelta encode_delta(const Box& anchor, const Box& gt) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + aw / 2, acy = anchor.y1 + ah / 2;
  const double gw = gt.width(), gh = gt.height();
  const double gcx = gt.x1 + gw / 2, gcy = gt.y1 + gh / 2;
  return {(gcx - acx) / aw, (gcy - acy) / ah, std::log(gw / aw), std::log(gh / ah)};
}

inline Box decode_delta(const Box& anchor, const BoxDelta& d) {
  constexpr double kMaxLog = 4.0;  // guards exp() against wild regressions
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + aw / 2, acy = anchor.y1 + ah / 2;
  const double cx = acx + d.dx * aw;
  const double cy = acy + d.dy * ah;
  const double w = aw * std::exp(std::clamp(d.dw, -kMaxLog, kMaxLog));
  const double h = ah * std::exp(std::clamp(d.dh, -kMaxLog, kMaxLog));
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline Box clip_box(const Box& b, double w, double h) {
  return Box{std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
             std::clamp(b.y2, 0.0, h)};
}

/// Greedy NMS over candidate indices pre-sorted by descending score.
inline std::vector<std::size_t> nms(const std::vector<Box>& boxes,
                                    const std::vector<std::size_t>& order, double iou_thresh,
                                    std::size_t max_keep) {
  std::vector<std::size_t> keep;
  for (const auto idx : order) {
    bool suppressed = false;
    for (const auto k : keep) {
      if (box_iou(boxes[idx], boxes[k]) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      keep.push_back(idx);
      if (keep.size() >= max_keep) break;
    }
  }
  return keep;
}

struct Roi {
  int batch_index = 0;
  Box box;  // input-image coordinates
};

/// RoIAlign with 2x2 bilinear sampling per bin (aligned variant: half-pixel
/// offset removed after scaling). Forward caches nothing heavy; backward
/// recomputes the sampling weights and scatters into the feature gradient.
template <typename T>
class RoiAlign {
public:
  RoiAlign(int out_size, double spatial_scale)
      : out_(out_size), scale_(spatial_scale) {}

  Tensor<T> forward(const Tensor<T>& feat, const std::vector<Roi>& rois) {
    feat_shape_ = feat.shape;
    rois_ = rois;
    const auto c = feat.shape[1], fh = feat.shape[2], fw = feat.shape[3];
    Tensor<T> y({static_cast<std::int64_t>(rois.size()), c, out_, out_});
    for (std::size_t r = 0; r < rois.size(); ++r) {
      sample_roi(feat, rois[r], [&](std::int64_t ch, int py, int px, std::int64_t iy,
                                    std::int64_t ix, double w) {
        y.at4(static_cast<std::int64_t>(r), ch, py, px) +=
            static_cast<T>(w * static_cast<double>(feat.at4(rois[r].batch_index, ch, iy, ix)));
      });
      (void)fh;
      (void)fw;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dfeat(feat_shape_);
    for (std::size_t r = 0; r < rois_.size(); ++r) {
      sample_roi(dfeat, rois_[r], [&](std::int64_t ch, int py, int px, std::int64_t iy,
                                      std::int64_t ix, double w) {
        dfeat.at4(rois_[r].batch_index, ch, iy, ix) += static_cast<T>(
            w * static_cast<double>(dy.at4(static_cast<std::int64_t>(r), ch, py, px)));
      });
    }
    return dfeat;
  }

private:
  // Calls fn(channel, pool_y, pool_x, feat_y, feat_x, weight) for every
  // bilinear tap of every sampling point; weights include the 1/samples
  // average.
  template <typename Fn>
  void sample_roi(const Tensor<T>& like, const Roi& roi, Fn&& fn) const {
    const auto c = like.shape[1], fh = like.shape[2], fw = like.shape[3];
    const double x1 = roi.box.x1 * scale_ - 0.5;
    const double y1 = roi.box.y1 * scale_ - 0.5;
    const double x2 = roi.box.x2 * scale_ - 0.5;
    const double y2 = roi.box.y2 * scale_ - 0.5;
    const double bin_w = std::max(x2 - x1, 1e-6) / out_;
    const double bin_h = std::max(y2 - y1, 1e-6) / out_;
    constexpr int kSamples = 2;
    const double inv_count = 1.0 / (kSamples * kSamples);
    for (int py = 0; py < out_; ++py) {
      for (int px = 0; px < out_; ++px) {
        for (int sy = 0; sy < kSamples; ++sy) {
          for (int sx = 0; sx < kSamples; ++sx) {
            const double yy = y1 + (py + (sy + 0.5) / kSamples) * bin_h;
            const double xx = x1 + (px + (sx + 0.5) / kSamples) * bin_w;
            if (yy < -1.0 || yy > static_cast<double>(fh) || xx < -1.0 ||
                xx > static_cast<double>(fw))
              continue;
            const double cy = std::clamp(yy, 0.0, static_cast<double>(fh - 1));
            const double cx = std::clamp(xx, 0.0, static_cast<double>(fw - 1));
            const auto iy0 = static_cast<std::int64_t>(cy);
            const auto ix0 = static_cast<std::int64_t>(cx);
            const auto iy1 = std::min(iy0 + 1, fh - 1);
            const auto ix1 = std::min(ix0 + 1, fw - 1);
            const double wy = cy - iy0, wx = cx - ix0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              fn(ch, py, px, iy0, ix0, (1 - wy) * (1 - wx) * inv_count);
              fn(ch, py, px, iy0, ix1, (1 - wy) * wx * inv_count);
              fn(ch, py, px, iy1, ix0, wy * (1 - wx) * inv_count);
              fn(ch, py, px, iy1, ix1, wy * wx * inv_count);
            }
          }
        }
      }
    }
  }

  int out_;
  double scale_;
  std::vector<std::int64_t> feat_shape_;
  std::vector<Roi> rois_;
};

// ---- losses ----------------------------------------------------------

template <typename T>
double sigmoid(T z) {
  const double v = static_cast<double>(z);
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Numerically stable BCE-with-logits. Fills dlogits with d(sum)/dz; the
/// caller applies its own normalization to both loss and gradient.
template <typename T>
double bce_with_logits_sum(const std::vector<T>& logits, const std::vector<double>& targets,
                           std::vector<double>& dlogits) {
  double loss = 0.0;
  dlogits.assign(logits.size(), 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits[i]);
    const double t = targets[i];
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    dlogits[i] = sigmoid(z) - t;
  }
  return loss;
}

/// Softmax cross entropy over (N, K) logits with integer labels.
/// Returns the mean loss; dlogits holds d(mean)/dz.
template <typename T>
double softmax_ce_mean(const Tensor<T>& logits, const std::vector<int>& labels,
                       Tensor<T>& dlogits) {
  const auto n = logits.shape[0], k = logits.shape[1];
  dlogits = Tensor<T>(logits.shape);
  if (n == 0) return 0.0;
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = -1e30;
    for (std::int64_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits.at2(i, j)));
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(logits.at2(i, j)) - mx);
    const double logz = mx + std::log(denom);
    loss += logz - static_cast<double>(logits.at2(i, labels[i]));
    for (std::int64_t j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(logits.at2(i, j)) - logz);
      dlogits.at2(i, j) = static_cast<T>((p - (j == labels[i] ? 1.0 : 0.0)) * inv_n);
    }
  }
  return loss * inv_n;
}

/// Smooth L1 summed over all coordinates; dpred receives d(sum)/dpred.
inline double smooth_l1_sum(const std::vector<double>& pred, const std::vector<double>& target,
                            double beta, std::vector<double>& dpred) {
  double loss = 0.0;
  dpred.assign(pred.size(), 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    if (std::abs(d) < beta) {
      loss += 0.5 * d * d / beta;
      dpred[i] = d / beta;
    } else {
      loss += std::abs(d) - 0.5 * beta;
      dpred[i] = d > 0 ? 1.0 : -1.0;
    }
  }
  return loss;
}

}  // namespace dpt::nn
