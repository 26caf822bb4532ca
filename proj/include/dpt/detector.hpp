// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale anchor-based detector with the five transferable parts:
// backbone (conv+BN stack, stride 8), neck (two-level fusion), rpn (dense
// objectness + box deltas), box_head (4conv1fc) and mask_head. Every
// normalization layer is a BatchNorm2d governed by the BN mode machinery.
// The architecture is deliberately small; what matters is the part taxonomy,
// the BN placement and the standard detection losses.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dpt/bn.hpp"
#include "dpt/common.hpp"
#include "dpt/detops.hpp"
#include "dpt/geometry.hpp"
#include "dpt/nn.hpp"
#include "dpt/tensor.hpp"

namespace dpt {

struct DetectorConfig {
  int in_channels = 3;
  int stem_channels = 12;       // doubles per backbone stage: 12 -> 24 -> 48
  int feat_channels = 48;       // neck / rpn / box head width
  int mask_channels = 24;
  int num_classes = 3;          // foreground classes
  std::vector<double> anchor_sizes{12.0, 24.0, 48.0};
  int box_roi_size = 7;
  int mask_roi_size = 14;

  int rpn_pre_nms = 64;
  int rpn_post_nms = 16;
  double rpn_nms_iou = 0.7;
  int rpn_sample_count = 32;
  int rpn_pos_cap = 16;
  double rpn_pos_iou = 0.5;
  double rpn_neg_iou = 0.3;

  int roi_sample_count = 8;
  int roi_pos_cap = 4;
  double roi_pos_iou = 0.5;

  double score_thresh = 0.05;
  double det_nms_iou = 0.5;
  int max_detections = 20;

  int stride() const { return 8; }
};

/// Ground truth for one image in post-resize coordinates.
struct GtInstances {
  std::vector<Box> boxes;
  std::vector<int> labels;  // 1..num_classes
  std::vector<Mask> masks;  // optional, resized space
  int width = 0, height = 0;
};

struct Detection {
  int class_id = 0;  // 1..num_classes
  double score = 0.0;
  Box box;                       // post-resize coordinates
  int mask_size = 0;             // mask grid side, 0 when masks are off
  std::vector<float> mask_prob;  // mask_size^2 sigmoid probabilities over box
};

struct StepStats {
  double total = 0.0;
  double rpn_obj = 0.0;
  double rpn_box = 0.0;
  double cls = 0.0;
  double box = 0.0;
  double mask = 0.0;
  int pos_anchors = 0;
  int pos_rois = 0;
};

template <typename T>
class ToyDetector {
public:
  explicit ToyDetector(DetectorConfig cfg = {}) : cfg_(std::move(cfg)) { build(); }

  const DetectorConfig& config() const { return cfg_; }

  /// Deterministic He-normal initialization of every module.
  void init_weights(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xD37EC7ull));
    stem_conv_.init(rng);
    l1_conv_.init(rng);
    l2_conv_.init(rng);
    neck_fine_.init(rng);
    neck_coarse_.init(rng);
    rpn_conv_.init(rng);
    rpn_obj_.init(rng);
    rpn_reg_.init(rng);
    for (auto& c : bh_conv_) c.init(rng);
    bh_fc_.init(rng);
    bh_cls_.init(rng);
    bh_reg_.init(rng);
    mh_reduce_.init(rng);
    mh_conv1_.init(rng);
    mh_conv2_.init(rng);
    mh_logits_.init(rng);
  }

  // ---- feature pipeline -------------------------------------------------

  Tensor<T> forward_features(const Tensor<T>& x, bool training) {
    auto s = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(x), training));
    auto a = l1_relu_.forward(l1_bn_.forward(l1_conv_.forward(s), training));
    auto b = l2_relu_.forward(l2_bn_.forward(l2_conv_.forward(a), training));
    auto fused = neck_fine_.forward(a);
    fused += neck_coarse_.forward(b);
    return neck_relu_.forward(neck_bn_.forward(fused, training));
  }

  void backward_features(const Tensor<T>& dp) {
    auto dsum = neck_bn_.backward(neck_relu_.backward(dp));
    auto dl1 = neck_fine_.backward(dsum);
    auto dl2 = neck_coarse_.backward(dsum);
    auto dl1_from_l2 = l2_conv_.backward(l2_bn_.backward(l2_relu_.backward(dl2)));
    dl1 += dl1_from_l2;
    auto ds = l1_conv_.backward(l1_bn_.backward(l1_relu_.backward(dl1)));
    stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(ds)));
  }

  struct RpnOut {
    Tensor<T> objectness;  // N x A x h x w logits
    Tensor<T> deltas;      // N x 4A x h x w
  };

  RpnOut rpn_forward(const Tensor<T>& p, bool training) {
    auto t = rpn_relu_.forward(rpn_bn_.forward(rpn_conv_.forward(p), training));
    return {rpn_obj_.forward(t), rpn_reg_.forward(t)};
  }

  Tensor<T> rpn_backward(const Tensor<T>& dobj, const Tensor<T>& ddeltas) {
    auto dt = rpn_obj_.backward(dobj);
    dt += rpn_reg_.backward(ddeltas);
    return rpn_conv_.backward(rpn_bn_.backward(rpn_relu_.backward(dt)));
  }

  struct BoxHeadOut {
    Tensor<T> cls;  // R x (num_classes + 1)
    Tensor<T> reg;  // R x 4, class-agnostic deltas
  };

  BoxHeadOut box_head_forward(const Tensor<T>& p, const std::vector<nn::Roi>& rois,
                              bool training) {
    auto h = box_align_.forward(p, rois);
    for (int i = 0; i < 4; ++i)
      h = bh_relu_[i].forward(bh_bn_[i].forward(bh_conv_[i].forward(h), training));
    bh_flat_shape_ = h.shape;
    h.shape = {h.shape[0], h.shape[1] * h.shape[2] * h.shape[3]};
    auto f = bh_fc_relu_.forward(bh_fc_.forward(h));
    return {bh_cls_.forward(f), bh_reg_.forward(f)};
  }

  Tensor<T> box_head_backward(const Tensor<T>& dcls, const Tensor<T>& dreg) {
    auto df = bh_cls_.backward(dcls);
    df += bh_reg_.backward(dreg);
    auto dflat = bh_fc_.backward(bh_fc_relu_.backward(df));
    dflat.shape = bh_flat_shape_;
    for (int i = 3; i >= 0; --i)
      dflat = bh_conv_[i].backward(bh_bn_[i].backward(bh_relu_[i].backward(dflat)));
    return box_align_.backward(dflat);
  }

  Tensor<T> mask_head_forward(const Tensor<T>& p, const std::vector<nn::Roi>& rois,
                              bool training) {
    auto h = mask_align_.forward(p, rois);
    h = mh_relu0_.forward(mh_bn0_.forward(mh_reduce_.forward(h), training));
    h = mh_relu1_.forward(mh_bn1_.forward(mh_conv1_.forward(h), training));
    h = mh_relu2_.forward(mh_bn2_.forward(mh_conv2_.forward(h), training));
    return mh_logits_.forward(h);  // R x 1 x m x m
  }

  Tensor<T> mask_head_backward(const Tensor<T>& dlogits) {
    auto dh = mh_logits_.backward(dlogits);
    dh = mh_conv2_.backward(mh_bn2_.backward(mh_relu2_.backward(dh)));
    dh = mh_conv1_.backward(mh_bn1_.backward(mh_relu1_.backward(dh)));
    dh = mh_reduce_.backward(mh_bn0_.backward(mh_relu0_.backward(dh)));
    return mask_align_.backward(dh);
  }

  // ---- model surface ----------------------------------------------------

  std::vector<nn::ArrayRef<T>> named_parameters() {
    std::vector<nn::ArrayRef<T>> params;
    std::vector<nn::ArrayRef<T>> buffers;
    collect(params, buffers);
    return params;
  }

  std::vector<nn::ArrayRef<T>> named_buffers() {
    std::vector<nn::ArrayRef<T>> params;
    std::vector<nn::ArrayRef<T>> buffers;
    collect(params, buffers);
    return buffers;
  }

  /// Parameters plus buffers; the full checkpointable tree.
  std::vector<nn::ArrayRef<T>> named_arrays() {
    auto params = named_parameters();
    auto buffers = named_buffers();
    params.insert(params.end(), buffers.begin(), buffers.end());
    return params;
  }

  /// Exactly the parameters the optimizer may update under current BN modes.
  std::vector<nn::ArrayRef<T>> trainable_parameters() {
    std::vector<nn::ArrayRef<T>> params;
    std::vector<nn::ArrayRef<T>> buffers;
    std::vector<nn::ArrayRef<T>> out;
    collect(params, buffers);
    for (auto& p : params) {
      const auto* bn = bn_layer_of(p.name);
      if (bn != nullptr && !bn->affine_trainable()) continue;
      out.push_back(p);
    }
    return out;
  }

  std::vector<nn::BatchNorm2d<T>*> bn_layers() {
    return {&stem_bn_, &l1_bn_,    &l2_bn_,    &neck_bn_,  &rpn_bn_, &bh_bn_[0], &bh_bn_[1],
            &bh_bn_[2], &bh_bn_[3], &mh_bn0_,   &mh_bn1_,   &mh_bn2_};
  }

  void set_bn_mode(BnMode mode) {
    for (auto* bn : bn_layers()) bn->state().mode = mode;
  }

  void set_sync_workers(int workers) {
    for (auto* bn : bn_layers()) bn->set_sync_workers(workers);
  }

  /// Prefix registry mapping parameter names to the five part tags.
  static const std::vector<std::pair<std::string, std::string>>& part_registry() {
    static const std::vector<std::pair<std::string, std::string>> reg = {
        {"backbone.", "backbone"},
        {"neck.", "neck"},
        {"rpn.", "rpn"},
        {"box_head.", "box_head"},
        {"mask_head.", "mask_head"},
    };
    return reg;
  }

  // ---- training step ----------------------------------------------------

  /// Forward + loss + backward for one batch. Gradients are accumulated into
  /// the parameter arrays; the caller owns zero_grad and the optimizer step.
  StepStats train_step(const Tensor<T>& x, const std::vector<GtInstances>& gts, Rng& rng) {
    const auto n = x.shape[0];
    auto p = forward_features(x, true);
    auto rpn = rpn_forward(p, true);
    const int fh = static_cast<int>(p.shape[2]);
    const int fw = static_cast<int>(p.shape[3]);
    const int num_sizes = static_cast<int>(cfg_.anchor_sizes.size());
    const auto anchors = nn::make_anchors(fh, fw, cfg_.stride(), cfg_.anchor_sizes);

    StepStats stats;
    Tensor<T> dobj(rpn.objectness.shape);
    Tensor<T> ddeltas(rpn.deltas.shape);

    // ---- RPN targets ----
    struct ObjSample {
      std::int64_t image, channel, y, x;
      double target;
    };
    std::vector<ObjSample> obj_samples;
    struct RegSample {
      std::int64_t image, size_idx, y, x;
      nn::BoxDelta target;
    };
    std::vector<RegSample> reg_samples;

    for (std::int64_t i = 0; i < n; ++i) {
      const auto& gt = gts[i];
      std::vector<double> max_iou(anchors.size(), 0.0);
      std::vector<int> argmax(anchors.size(), -1);
      std::vector<char> forced(anchors.size(), 0);
      for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
        double best = 0.0;
        std::size_t best_a = 0;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
          const double iou = box_iou(anchors[a], gt.boxes[g]);
          if (iou > max_iou[a]) {
            max_iou[a] = iou;
            argmax[a] = static_cast<int>(g);
          }
          if (iou > best) {
            best = iou;
            best_a = a;
          }
        }
        if (best > 0.0) {
          forced[best_a] = 1;  // every gt owns its best-overlap anchor
          if (argmax[best_a] < 0 || max_iou[best_a] < best) argmax[best_a] = static_cast<int>(g);
        }
      }
      std::vector<std::size_t> pos, neg;
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (forced[a] || max_iou[a] >= cfg_.rpn_pos_iou) {
          pos.push_back(a);
        } else if (max_iou[a] < cfg_.rpn_neg_iou) {
          neg.push_back(a);
        }
      }
      subsample(pos, static_cast<std::size_t>(cfg_.rpn_pos_cap), rng);
      const std::size_t neg_want =
          static_cast<std::size_t>(cfg_.rpn_sample_count) - std::min<std::size_t>(pos.size(), cfg_.rpn_sample_count);
      subsample(neg, neg_want, rng);

      for (const auto a : pos) {
        const auto [sy, sx, ss] = anchor_coords(a, fw, num_sizes);
        obj_samples.push_back({i, ss, sy, sx, 1.0});
        reg_samples.push_back({i, ss, sy, sx, nn::encode_delta(anchors[a], gt.boxes[argmax[a]])});
      }
      for (const auto a : neg) {
        const auto [sy, sx, ss] = anchor_coords(a, fw, num_sizes);
        obj_samples.push_back({i, ss, sy, sx, 0.0});
      }
      stats.pos_anchors += static_cast<int>(pos.size());
    }

    const double obj_norm = obj_samples.empty() ? 1.0 : static_cast<double>(obj_samples.size());
    for (const auto& s : obj_samples) {
      const double z = static_cast<double>(rpn.objectness.at4(s.image, s.channel, s.y, s.x));
      stats.rpn_obj +=
          (std::max(z, 0.0) - z * s.target + std::log1p(std::exp(-std::abs(z)))) / obj_norm;
      dobj.at4(s.image, s.channel, s.y, s.x) =
          static_cast<T>((nn::sigmoid(z) - s.target) / obj_norm);
    }
    for (const auto& s : reg_samples) {
      const double pred[4] = {
          static_cast<double>(rpn.deltas.at4(s.image, 4 * s.size_idx + 0, s.y, s.x)),
          static_cast<double>(rpn.deltas.at4(s.image, 4 * s.size_idx + 1, s.y, s.x)),
          static_cast<double>(rpn.deltas.at4(s.image, 4 * s.size_idx + 2, s.y, s.x)),
          static_cast<double>(rpn.deltas.at4(s.image, 4 * s.size_idx + 3, s.y, s.x))};
      const double tgt[4] = {s.target.dx, s.target.dy, s.target.dw, s.target.dh};
      for (int j = 0; j < 4; ++j) {
        const double d = pred[j] - tgt[j];
        constexpr double beta = 1.0;
        double grad;
        if (std::abs(d) < beta) {
          stats.rpn_box += 0.5 * d * d / beta / obj_norm;
          grad = d / beta / obj_norm;
        } else {
          stats.rpn_box += (std::abs(d) - 0.5 * beta) / obj_norm;
          grad = (d > 0 ? 1.0 : -1.0) / obj_norm;
        }
        ddeltas.at4(s.image, 4 * s.size_idx + j, s.y, s.x) = static_cast<T>(grad);
      }
    }

    // ---- proposals and RoI sampling ----
    std::vector<nn::Roi> rois;
    std::vector<int> roi_labels;           // 0 = background
    std::vector<nn::BoxDelta> roi_targets; // defined for positives
    std::vector<int> roi_gt;               // gt index for positives, else -1
    std::vector<nn::Roi> mask_rois;
    std::vector<std::pair<std::int64_t, int>> mask_src;  // (image, gt index)

    for (std::int64_t i = 0; i < n; ++i) {
      const auto& gt = gts[i];
      auto proposals = propose(rpn, anchors, i, fw, num_sizes, gt.width, gt.height,
                               cfg_.rpn_pre_nms, cfg_.rpn_post_nms);
      std::vector<Box> candidates = proposals;
      candidates.insert(candidates.end(), gt.boxes.begin(), gt.boxes.end());

      std::vector<std::size_t> pos_c, neg_c;
      std::vector<int> cand_gt(candidates.size(), -1);
      for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
        double best = 0.0;
        int best_g = -1;
        for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
          const double iou = box_iou(candidates[ci], gt.boxes[g]);
          if (iou > best) {
            best = iou;
            best_g = static_cast<int>(g);
          }
        }
        if (best >= cfg_.roi_pos_iou) {
          cand_gt[ci] = best_g;
          pos_c.push_back(ci);
        } else {
          neg_c.push_back(ci);
        }
      }
      subsample(pos_c, static_cast<std::size_t>(cfg_.roi_pos_cap), rng);
      const std::size_t neg_want =
          static_cast<std::size_t>(cfg_.roi_sample_count) -
          std::min<std::size_t>(pos_c.size(), cfg_.roi_sample_count);
      subsample(neg_c, neg_want, rng);

      for (const auto ci : pos_c) {
        rois.push_back({static_cast<int>(i), candidates[ci]});
        roi_labels.push_back(gt.labels[cand_gt[ci]]);
        roi_targets.push_back(nn::encode_delta(candidates[ci], gt.boxes[cand_gt[ci]]));
        roi_gt.push_back(cand_gt[ci]);
        if (!gt.masks.empty()) {
          mask_rois.push_back({static_cast<int>(i), candidates[ci]});
          mask_src.push_back({i, cand_gt[ci]});
        }
      }
      for (const auto ci : neg_c) {
        rois.push_back({static_cast<int>(i), candidates[ci]});
        roi_labels.push_back(0);
        roi_targets.push_back({});
        roi_gt.push_back(-1);
      }
      stats.pos_rois += static_cast<int>(pos_c.size());
    }

    // ---- box head losses ----
    Tensor<T> dp_heads;
    if (!rois.empty()) {
      auto head = box_head_forward(p, rois, true);
      Tensor<T> dcls;
      stats.cls = nn::softmax_ce_mean(head.cls, roi_labels, dcls);
      Tensor<T> dreg(head.reg.shape);
      const double reg_norm = static_cast<double>(rois.size());
      for (std::size_t r = 0; r < rois.size(); ++r) {
        if (roi_labels[r] == 0) continue;
        const double tgt[4] = {roi_targets[r].dx, roi_targets[r].dy, roi_targets[r].dw,
                               roi_targets[r].dh};
        for (int j = 0; j < 4; ++j) {
          const double d = static_cast<double>(head.reg.at2(static_cast<std::int64_t>(r), j)) - tgt[j];
          constexpr double beta = 1.0;
          if (std::abs(d) < beta) {
            stats.box += 0.5 * d * d / beta / reg_norm;
            dreg.at2(static_cast<std::int64_t>(r), j) = static_cast<T>(d / beta / reg_norm);
          } else {
            stats.box += (std::abs(d) - 0.5 * beta) / reg_norm;
            dreg.at2(static_cast<std::int64_t>(r), j) = static_cast<T>((d > 0 ? 1.0 : -1.0) / reg_norm);
          }
        }
      }
      dp_heads = box_head_backward(dcls, dreg);
    } else {
      dp_heads = Tensor<T>(p.shape);
    }

    // ---- mask head loss ----
    if (!mask_rois.empty()) {
      auto mlogits = mask_head_forward(p, mask_rois, true);
      const int m = cfg_.mask_roi_size;
      Tensor<T> dmask(mlogits.shape);
      const double norm = static_cast<double>(mask_rois.size()) * m * m;
      for (std::size_t r = 0; r < mask_rois.size(); ++r) {
        const auto [img, g] = mask_src[r];
        const auto& gmask = gts[img].masks[g];
        const auto& b = mask_rois[r].box;
        for (int gy = 0; gy < m; ++gy) {
          for (int gx = 0; gx < m; ++gx) {
            const double sx = b.x1 + (gx + 0.5) * (b.x2 - b.x1) / m;
            const double sy = b.y1 + (gy + 0.5) * (b.y2 - b.y1) / m;
            const int ix = std::clamp(static_cast<int>(std::floor(sx)), 0, gmask.w - 1);
            const int iy = std::clamp(static_cast<int>(std::floor(sy)), 0, gmask.h - 1);
            const double t = gmask.at(ix, iy) ? 1.0 : 0.0;
            const double z = static_cast<double>(mlogits.at4(static_cast<std::int64_t>(r), 0, gy, gx));
            stats.mask +=
                (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)))) / norm;
            dmask.at4(static_cast<std::int64_t>(r), 0, gy, gx) =
                static_cast<T>((nn::sigmoid(z) - t) / norm);
          }
        }
      }
      dp_heads += mask_head_backward(dmask);
    }

    // ---- backward through the shared trunk ----
    auto dp = rpn_backward(dobj, ddeltas);
    dp += dp_heads;
    backward_features(dp);

    stats.total = stats.rpn_obj + stats.rpn_box + stats.cls + stats.box + stats.mask;
    return stats;
  }

  // ---- inference ----------------------------------------------------------

  /// image_sizes: post-resize (width, height) per sample, for clipping.
  std::vector<std::vector<Detection>> detect(const Tensor<T>& x,
                                             const std::vector<std::pair<int, int>>& image_sizes,
                                             bool with_masks = true) {
    const auto n = x.shape[0];
    auto p = forward_features(x, false);
    auto rpn = rpn_forward(p, false);
    const int fw = static_cast<int>(p.shape[3]);
    const int num_sizes = static_cast<int>(cfg_.anchor_sizes.size());
    const auto anchors = nn::make_anchors(static_cast<int>(p.shape[2]), fw, cfg_.stride(),
                                          cfg_.anchor_sizes);

    std::vector<std::vector<Detection>> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      const auto [iw, ih] = image_sizes[static_cast<std::size_t>(i)];
      auto proposals =
          propose(rpn, anchors, i, fw, num_sizes, iw, ih, cfg_.rpn_pre_nms, cfg_.rpn_post_nms);
      if (proposals.empty()) continue;
      std::vector<nn::Roi> rois;
      for (const auto& b : proposals) rois.push_back({static_cast<int>(i), b});
      auto head = box_head_forward(p, rois, false);

      std::vector<Detection> dets;
      const std::int64_t k = head.cls.shape[1];
      for (std::size_t r = 0; r < rois.size(); ++r) {
        double mx = -1e30;
        for (std::int64_t j = 0; j < k; ++j)
          mx = std::max(mx, static_cast<double>(head.cls.at2(static_cast<std::int64_t>(r), j)));
        double denom = 0.0;
        for (std::int64_t j = 0; j < k; ++j)
          denom += std::exp(static_cast<double>(head.cls.at2(static_cast<std::int64_t>(r), j)) - mx);
        const nn::BoxDelta d{
            static_cast<double>(head.reg.at2(static_cast<std::int64_t>(r), 0)),
            static_cast<double>(head.reg.at2(static_cast<std::int64_t>(r), 1)),
            static_cast<double>(head.reg.at2(static_cast<std::int64_t>(r), 2)),
            static_cast<double>(head.reg.at2(static_cast<std::int64_t>(r), 3))};
        const Box refined = nn::clip_box(nn::decode_delta(rois[r].box, d), iw, ih);
        if (refined.width() < 1.0 || refined.height() < 1.0) continue;
        for (std::int64_t cls = 1; cls < k; ++cls) {
          const double prob =
              std::exp(static_cast<double>(head.cls.at2(static_cast<std::int64_t>(r), cls)) - mx) /
              denom;
          if (prob < cfg_.score_thresh) continue;
          Detection det;
          det.class_id = static_cast<int>(cls);
          det.score = prob;
          det.box = refined;
          dets.push_back(std::move(det));
        }
      }

      // per-class NMS, then a global cap by score
      std::vector<Detection> kept;
      for (int cls = 1; cls <= cfg_.num_classes; ++cls) {
        std::vector<std::size_t> idx;
        for (std::size_t d = 0; d < dets.size(); ++d)
          if (dets[d].class_id == cls) idx.push_back(d);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
        std::vector<Box> boxes;
        boxes.reserve(dets.size());
        for (const auto& d : dets) boxes.push_back(d.box);
        for (const auto keep_idx : nn::nms(boxes, idx, cfg_.det_nms_iou, 1000)) {
          kept.push_back(dets[keep_idx]);
        }
      }
      std::stable_sort(kept.begin(), kept.end(),
                       [](const Detection& a, const Detection& b) { return a.score > b.score; });
      if (static_cast<int>(kept.size()) > cfg_.max_detections) kept.resize(cfg_.max_detections);

      if (with_masks && !kept.empty()) {
        std::vector<nn::Roi> mrois;
        for (const auto& d : kept) mrois.push_back({static_cast<int>(i), d.box});
        auto mlogits = mask_head_forward(p, mrois, false);
        const int m = cfg_.mask_roi_size;
        for (std::size_t d = 0; d < kept.size(); ++d) {
          kept[d].mask_size = m;
          kept[d].mask_prob.resize(static_cast<std::size_t>(m) * m);
          for (int gy = 0; gy < m; ++gy)
            for (int gx = 0; gx < m; ++gx)
              kept[d].mask_prob[static_cast<std::size_t>(gy) * m + gx] = static_cast<float>(
                  nn::sigmoid(mlogits.at4(static_cast<std::int64_t>(d), 0, gy, gx)));
        }
      }
      out[static_cast<std::size_t>(i)] = std::move(kept);
    }
    return out;
  }

private:
  void build() {
    const int c1 = cfg_.stem_channels, c2 = 2 * c1, c3 = 4 * c1, f = cfg_.feat_channels;
    stem_conv_ = nn::Conv2d<T>(cfg_.in_channels, c1, 3, 2, 1, false);
    stem_bn_ = nn::BatchNorm2d<T>(c1);
    l1_conv_ = nn::Conv2d<T>(c1, c2, 3, 2, 1, false);
    l1_bn_ = nn::BatchNorm2d<T>(c2);
    l2_conv_ = nn::Conv2d<T>(c2, c3, 3, 2, 1, false);
    l2_bn_ = nn::BatchNorm2d<T>(c3);
    neck_fine_ = nn::Conv2d<T>(c2, f, 3, 2, 1, false);
    neck_coarse_ = nn::Conv2d<T>(c3, f, 1, 1, 0, false);
    neck_bn_ = nn::BatchNorm2d<T>(f);
    const int a = static_cast<int>(cfg_.anchor_sizes.size());
    rpn_conv_ = nn::Conv2d<T>(f, f, 3, 1, 1, false);
    rpn_bn_ = nn::BatchNorm2d<T>(f);
    rpn_obj_ = nn::Conv2d<T>(f, a, 1, 1, 0, true);
    rpn_reg_ = nn::Conv2d<T>(f, 4 * a, 1, 1, 0, true);
    for (int i = 0; i < 4; ++i) {
      bh_conv_[i] = nn::Conv2d<T>(f, f, 3, 1, 1, false);
      bh_bn_[i] = nn::BatchNorm2d<T>(f);
    }
    bh_fc_ = nn::Linear<T>(f * cfg_.box_roi_size * cfg_.box_roi_size, 128);
    bh_cls_ = nn::Linear<T>(128, cfg_.num_classes + 1);
    bh_reg_ = nn::Linear<T>(128, 4);
    mh_reduce_ = nn::Conv2d<T>(f, cfg_.mask_channels, 1, 1, 0, false);
    mh_bn0_ = nn::BatchNorm2d<T>(cfg_.mask_channels);
    mh_conv1_ = nn::Conv2d<T>(cfg_.mask_channels, cfg_.mask_channels, 3, 1, 1, false);
    mh_bn1_ = nn::BatchNorm2d<T>(cfg_.mask_channels);
    mh_conv2_ = nn::Conv2d<T>(cfg_.mask_channels, cfg_.mask_channels, 3, 1, 1, false);
    mh_bn2_ = nn::BatchNorm2d<T>(cfg_.mask_channels);
    mh_logits_ = nn::Conv2d<T>(cfg_.mask_channels, 1, 1, 1, 0, true);
    box_align_ = nn::RoiAlign<T>(cfg_.box_roi_size, 1.0 / cfg_.stride());
    mask_align_ = nn::RoiAlign<T>(cfg_.mask_roi_size, 1.0 / cfg_.stride());
  }

  void collect(std::vector<nn::ArrayRef<T>>& params, std::vector<nn::ArrayRef<T>>& buffers) {
    stem_conv_.collect("backbone.stem.conv", params);
    stem_bn_.collect("backbone.stem.bn", params, buffers);
    l1_conv_.collect("backbone.layer1.conv", params);
    l1_bn_.collect("backbone.layer1.bn", params, buffers);
    l2_conv_.collect("backbone.layer2.conv", params);
    l2_bn_.collect("backbone.layer2.bn", params, buffers);
    neck_fine_.collect("neck.lateral_fine.conv", params);
    neck_coarse_.collect("neck.lateral_coarse.conv", params);
    neck_bn_.collect("neck.fuse_bn", params, buffers);
    rpn_conv_.collect("rpn.conv", params);
    rpn_bn_.collect("rpn.bn", params, buffers);
    rpn_obj_.collect("rpn.objectness", params);
    rpn_reg_.collect("rpn.regress", params);
    for (int i = 0; i < 4; ++i) {
      bh_conv_[i].collect("box_head.conv" + std::to_string(i + 1), params);
      bh_bn_[i].collect("box_head.bn" + std::to_string(i + 1), params, buffers);
    }
    bh_fc_.collect("box_head.fc", params);
    bh_cls_.collect("box_head.cls", params);
    bh_reg_.collect("box_head.reg", params);
    mh_reduce_.collect("mask_head.reduce", params);
    mh_bn0_.collect("mask_head.bn0", params, buffers);
    mh_conv1_.collect("mask_head.conv1", params);
    mh_bn1_.collect("mask_head.bn1", params, buffers);
    mh_conv2_.collect("mask_head.conv2", params);
    mh_bn2_.collect("mask_head.bn2", params, buffers);
    mh_logits_.collect("mask_head.logits", params);
  }

  const nn::BatchNorm2d<T>* bn_layer_of(const std::string& param_name) {
    struct Entry {
      const char* prefix;
      nn::BatchNorm2d<T>* layer;
    };
    const Entry entries[] = {
        {"backbone.stem.bn.", &stem_bn_},   {"backbone.layer1.bn.", &l1_bn_},
        {"backbone.layer2.bn.", &l2_bn_},   {"neck.fuse_bn.", &neck_bn_},
        {"rpn.bn.", &rpn_bn_},              {"box_head.bn1.", &bh_bn_[0]},
        {"box_head.bn2.", &bh_bn_[1]},      {"box_head.bn3.", &bh_bn_[2]},
        {"box_head.bn4.", &bh_bn_[3]},      {"mask_head.bn0.", &mh_bn0_},
        {"mask_head.bn1.", &mh_bn1_},       {"mask_head.bn2.", &mh_bn2_},
    };
    for (const auto& e : entries) {
      if (param_name.rfind(e.prefix, 0) == 0) return e.layer;
    }
    return nullptr;
  }

  static std::tuple<std::int64_t, std::int64_t, std::int64_t> anchor_coords(std::size_t anchor_idx,
                                                                            int fw, int num_sizes) {
    const auto cell = anchor_idx / num_sizes;
    const auto size_idx = anchor_idx % num_sizes;
    return {static_cast<std::int64_t>(cell / fw), static_cast<std::int64_t>(cell % fw),
            static_cast<std::int64_t>(size_idx)};
  }

  void subsample(std::vector<std::size_t>& idx, std::size_t want, Rng& rng) const {
    if (idx.size() <= want) return;
    // partial Fisher-Yates, deterministic under the step rng
    for (std::size_t i = 0; i < want; ++i) {
      const auto j = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(idx.size()) - 1));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(want);
  }

  std::vector<Box> propose(const RpnOut& rpn, const std::vector<Box>& anchors, std::int64_t image,
                           int fw, int num_sizes, int img_w, int img_h, int pre_nms,
                           int post_nms) const {
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const auto [sy, sx, ss] = anchor_coords(a, fw, num_sizes);
      scored.push_back({static_cast<double>(rpn.objectness.at4(image, ss, sy, sx)), a});
    }
    const std::size_t take = std::min<std::size_t>(pre_nms, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + take, scored.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    std::vector<Box> boxes;
    std::vector<std::size_t> order;
    for (std::size_t s = 0; s < take; ++s) {
      const auto a = scored[s].second;
      const auto [sy, sx, ss] = anchor_coords(a, fw, num_sizes);
      const nn::BoxDelta d{static_cast<double>(rpn.deltas.at4(image, 4 * ss + 0, sy, sx)),
                           static_cast<double>(rpn.deltas.at4(image, 4 * ss + 1, sy, sx)),
                           static_cast<double>(rpn.deltas.at4(image, 4 * ss + 2, sy, sx)),
                           static_cast<double>(rpn.deltas.at4(image, 4 * ss + 3, sy, sx))};
      const Box b = nn::clip_box(nn::decode_delta(anchors[a], d), img_w, img_h);
      if (b.width() < 1.0 || b.height() < 1.0) continue;
      order.push_back(boxes.size());
      boxes.push_back(b);
    }
    std::vector<Box> out;
    for (const auto k : nn::nms(boxes, order, cfg_.rpn_nms_iou, static_cast<std::size_t>(post_nms)))
      out.push_back(boxes[k]);
    return out;
  }

  DetectorConfig cfg_;

  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm2d<T> stem_bn_;
  nn::Relu<T> stem_relu_;
  nn::Conv2d<T> l1_conv_;
  nn::BatchNorm2d<T> l1_bn_;
  nn::Relu<T> l1_relu_;
  nn::Conv2d<T> l2_conv_;
  nn::BatchNorm2d<T> l2_bn_;
  nn::Relu<T> l2_relu_;
  nn::Conv2d<T> neck_fine_;
  nn::Conv2d<T> neck_coarse_;
  nn::BatchNorm2d<T> neck_bn_;
  nn::Relu<T> neck_relu_;
  nn::Conv2d<T> rpn_conv_;
  nn::BatchNorm2d<T> rpn_bn_;
  nn::Relu<T> rpn_relu_;
  nn::Conv2d<T> rpn_obj_;
  nn::Conv2d<T> rpn_reg_;
  std::array<nn::Conv2d<T>, 4> bh_conv_;
  std::array<nn::BatchNorm2d<T>, 4> bh_bn_;
  std::array<nn::Relu<T>, 4> bh_relu_;
  nn::Linear<T> bh_fc_;
  nn::Relu<T> bh_fc_relu_;
  nn::Linear<T> bh_cls_;
  nn::Linear<T> bh_reg_;
  nn::Conv2d<T> mh_reduce_;
  nn::BatchNorm2d<T> mh_bn0_;
  nn::Relu<T> mh_relu0_;
  nn::Conv2d<T> mh_conv1_;
  nn::BatchNorm2d<T> mh_bn1_;
  nn::Relu<T> mh_relu1_;
  nn::Conv2d<T> mh_conv2_;
  nn::BatchNorm2d<T> mh_bn2_;
  nn::Relu<T> mh_relu2_;
  nn::Conv2d<T> mh_logits_;
  nn::RoiAlign<T> box_align_{7, 1.0 / 8.0};
  nn::RoiAlign<T> mask_align_{14, 1.0 / 8.0};

  std::vector<std::int64_t> bh_flat_shape_;
};

/// Sets every BN layer's operating mode; in fixed mode gamma/beta leave the
/// trainable set (see ToyDetector::trainable_parameters).
template <typename T>
void set_bn_mode(ToyDetector<T>& model, BnMode mode) {
  model.set_bn_mode(mode);
}

template <typename T>
std::vector<nn::ArrayRef<T>> trainable_parameters(ToyDetector<T>& model) {
  return model.trainable_parameters();
}

}  // namespace dpt
