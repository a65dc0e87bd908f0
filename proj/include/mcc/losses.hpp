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

// Per-sample training losses. Each function optionally writes the gradient
// with respect to its prediction input so the trainer can seed backward().

#pragma once

#include "mcc/density_gt.hpp"
#include "mcc/tensor.hpp"

namespace mcc {

struct LossBreakdown {
  double l2_positive = 0;    // support-region term (or the plain L2 sum when regional is off)
  double l2_background = 0;  // background-region term, before w_r
  double mask_ce = 0;
  double total = 0;
  double w_r = 0;
};

struct LossConfig {
  bool regional = true;
  double w_r = 1.0;
};

/// Sum over classes and pixels of (pred - gt)^2.
double l2_loss(const DensityMap& pred, const DensityMap& gt, Tensor* grad = nullptr);

/// Squared error split by the region mask. Each class contributes the mean
/// over its mask=1 pixels to l2_positive and the mean over its mask=0
/// pixels to l2_background (denominators max(1, count)). With
/// mean_normalize=false both denominators are 1.
LossBreakdown regional_l2_loss(const DensityMap& pred, const DensityMap& gt, const RegionMask& mask, double w_r,
                               Tensor* grad = nullptr, bool mean_normalize = true);

/// logits: (2C,H,W) with channel 2c = class c positive, 2c+1 = background.
/// Two-way softmax cross-entropy per class, mean over pixels, mean over classes.
double mask_ce_loss(const Tensor& logits, const SegTarget& target, Tensor* grad = nullptr);

struct LossGradients {
  Tensor density;  // (C,H,W)
  Tensor logits;   // (2C,H,W); empty when no logits were given
};

/// mask_ce + density term. logits == nullptr means the masking branch is
/// disabled and contributes exactly zero.
LossBreakdown total_loss(const DensityMap& pred, const DensityMap& gt, const RegionMask& mask, const Tensor* logits,
                         const SegTarget& target, const LossConfig& config, LossGradients* grads = nullptr);

}  // namespace mcc
