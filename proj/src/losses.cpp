// Copyright 2026 The mcount Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mcc/losses.hpp"

#include <algorithm>
#include <cmath>

#include "mcc/autograd.hpp"
#include "mcc/error.hpp"

namespace mcc {

namespace {

void require_same_shape(const DensityMap& pred, const DensityMap& gt) {
  if (pred.raster.shape() != gt.raster.shape())
    fail_validation("loss: prediction " + shape_str(pred.raster.shape()) + " vs ground truth " +
                    shape_str(gt.raster.shape()));
}

}  // namespace

double l2_loss(const DensityMap& pred, const DensityMap& gt, Tensor* grad) {
  require_same_shape(pred, gt);
  if (grad) *grad = Tensor(pred.raster.shape(), 0.0);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.raster.numel(); ++i) {
    const double d = pred.raster[i] - gt.raster[i];
    s += d * d;
    if (grad) (*grad)[i] = 2.0 * d;
  }
  return s;
}

LossBreakdown regional_l2_loss(const DensityMap& pred, const DensityMap& gt, const RegionMask& mask, double w_r,
                               Tensor* grad, bool mean_normalize) {
  require_same_shape(pred, gt);
  if (mask.classes() != gt.classes() || mask.height() != gt.height() || mask.width() != gt.width())
    fail_validation("regional_l2_loss: region mask shape does not match density map");
  if (!(w_r >= 0)) fail_validation("regional_l2_loss: w_r must be >= 0");
  if (grad) *grad = Tensor(pred.raster.shape(), 0.0);
  LossBreakdown out;
  out.w_r = w_r;
  const int H = gt.height(), W = gt.width();
  for (int c = 0; c < gt.classes(); ++c) {
    const double n_pos = static_cast<double>(mask.count_ones(c));
    const double n_bg = static_cast<double>(H) * W - n_pos;
    const double den_pos = mean_normalize ? std::max(1.0, n_pos) : 1.0;
    const double den_bg = mean_normalize ? std::max(1.0, n_bg) : 1.0;
    double s_pos = 0.0, s_bg = 0.0;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const double d = pred.at(c, i, j) - gt.at(c, i, j);
        const bool positive = mask.at(c, i, j);
        (positive ? s_pos : s_bg) += d * d;
        if (grad) grad->at(c, i, j) = positive ? 2.0 * d / den_pos : w_r * 2.0 * d / den_bg;
      }
    }
    out.l2_positive += s_pos / den_pos;
    out.l2_background += s_bg / den_bg;
  }
  out.total = out.l2_positive + w_r * out.l2_background;
  return out;
}

double mask_ce_loss(const Tensor& logits, const SegTarget& target, Tensor* grad) {
  const BinaryRaster& pos = target.positive;
  const int C = pos.classes(), H = pos.height(), W = pos.width();
  if (logits.ndim() != 3 || logits.dim(0) != 2 * C)
    fail_validation("mask_ce_loss: expected " + std::to_string(2 * C) + " logit channels, got shape " +
                    shape_str(logits.shape()));
  if (logits.dim(1) != H || logits.dim(2) != W) fail_validation("mask_ce_loss: logits/target spatial mismatch");
  if (grad) *grad = Tensor(logits.shape(), 0.0);
  const double inv_pixels = 1.0 / (static_cast<double>(H) * W);
  double total = 0.0;
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const double a = logits.at(2 * c, i, j), b = logits.at(2 * c + 1, i, j);
        // -log softmax of the target channel = softplus(other - target)
        const double margin = pos.at(c, i, j) ? b - a : a - b;
        s += softplus_value(margin, 1.0);
        if (grad) {
          const double g = softplus_grad(margin, 1.0) * inv_pixels / C;
          const double sign = pos.at(c, i, j) ? 1.0 : -1.0;
          grad->at(2 * c, i, j) = -sign * g;
          grad->at(2 * c + 1, i, j) = sign * g;
        }
      }
    }
    total += s * inv_pixels;
  }
  return total / C;
}

LossBreakdown total_loss(const DensityMap& pred, const DensityMap& gt, const RegionMask& mask, const Tensor* logits,
                         const SegTarget& target, const LossConfig& config, LossGradients* grads) {
  LossBreakdown out;
  Tensor* dgrad = grads ? &grads->density : nullptr;
  if (config.regional) {
    out = regional_l2_loss(pred, gt, mask, config.w_r, dgrad);
  } else {
    out.l2_positive = l2_loss(pred, gt, dgrad);
    out.l2_background = 0.0;
    out.w_r = 0.0;
  }
  if (logits) {
    out.mask_ce = mask_ce_loss(*logits, target, grads ? &grads->logits : nullptr);
  } else if (grads) {
    grads->logits = Tensor();
  }
  out.total = out.mask_ce + out.l2_positive + out.w_r * out.l2_background;
  return out;
}

}  // namespace mcc
