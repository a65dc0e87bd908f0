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

#include "mcc/model.hpp"

#include <map>
#include <numeric>
#include <tuple>

#include "mcc/error.hpp"

namespace mcc {

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::ReferenceConv: return "reference-conv";
    case BackboneKind::SvtSmall: return "svt-small";
    case BackboneKind::SvtBase: return "svt-base";
    case BackboneKind::SvtLarge: return "svt-large";
  }
  return "?";
}

std::string to_string(CfmMode mode) {
  switch (mode) {
    case CfmMode::Off: return "off";
    case CfmMode::SingleScale: return "single_scale";
    case CfmMode::Multiscale: return "multiscale";
  }
  return "?";
}

BackboneKind parse_backbone_kind(const std::string& s) {
  for (auto k : {BackboneKind::ReferenceConv, BackboneKind::SvtSmall, BackboneKind::SvtBase, BackboneKind::SvtLarge})
    if (to_string(k) == s) return k;
  fail_validation("unknown backbone '" + s + "' (expected reference-conv, svt-small, svt-base or svt-large)");
}

CfmMode parse_cfm_mode(const std::string& s) {
  for (auto m : {CfmMode::Off, CfmMode::SingleScale, CfmMode::Multiscale})
    if (to_string(m) == s) return m;
  fail_validation("unknown cfm_mode '" + s + "' (expected off, single_scale or multiscale)");
}

void ModelConfig::validate() const {
  if (num_classes < 1) fail_validation("num_classes must be >= 1");
  if (output_stride != 1 && output_stride != 2 && output_stride != 4 && output_stride != 8)
    fail_validation("output_stride must be one of 1, 2, 4, 8");
  if (!(softplus_beta > 0)) fail_validation("softplus_beta must be > 0");
  if (!(w_r >= 0)) fail_validation("w_r must be >= 0");
  if (decoder_channels < 1) fail_validation("decoder_channels must be >= 1");
  for (int w : reference_widths)
    if (w < 1) fail_validation("reference_widths must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_classes", c.num_classes},
          {"backbone", to_string(c.backbone)},
          {"cfm_mode", to_string(c.cfm_mode)},
          {"output_stride", c.output_stride},
          {"softplus_beta", c.softplus_beta},
          {"w_r", c.w_r},
          {"decoder_channels", c.decoder_channels},
          {"reference_widths", c.reference_widths}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_classes = j.value("num_classes", c.num_classes);
    c.backbone = parse_backbone_kind(j.value("backbone", to_string(c.backbone)));
    c.cfm_mode = parse_cfm_mode(j.value("cfm_mode", to_string(c.cfm_mode)));
    c.output_stride = j.value("output_stride", c.output_stride);
    c.softplus_beta = j.value("softplus_beta", c.softplus_beta);
    c.w_r = j.value("w_r", c.w_r);
    c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
    if (j.contains("reference_widths")) c.reference_widths = j.at("reference_widths").get<std::array<int, 4>>();
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void require_divisible_by_32(int height, int width) {
  if (height <= 0 || width <= 0 || height % 32 || width % 32)
    fail_validation("image size " + std::to_string(width) + "x" + std::to_string(height) +
                    " is not divisible by 32; pad the image first");
}

// ---------------------------------------------------------------------------
// Reference convolution backbone

struct ReferenceConvBackbone::Stage : Module {
  Conv2d* embed;
  BatchNorm2d* bn1;
  Conv2d* conv;
  BatchNorm2d* bn2;

  Stage(int in, int out, int patch, std::mt19937_64& rng) {
    embed = &add_module("embed", std::make_unique<Conv2d>(in, out, Conv2d::Options{.kernel = patch, .stride = patch, .bias = false}, rng));
    bn1 = &add_module("bn1", std::make_unique<BatchNorm2d>(out));
    conv = &add_module("conv", std::make_unique<Conv2d>(out, out, Conv2d::Options{.kernel = 3, .padding = 1, .bias = false}, rng));
    bn2 = &add_module("bn2", std::make_unique<BatchNorm2d>(out));
  }
  Var forward(const Var& x) {
    Var y = ops::relu(bn1->forward(embed->forward(x)));
    return ops::relu(bn2->forward(conv->forward(y)));
  }
};

ReferenceConvBackbone::ReferenceConvBackbone(std::array<int, 4> widths, std::mt19937_64& rng) : widths_(widths) {
  int in = 3;
  for (int s = 0; s < 4; ++s) {
    stages_.push_back(&add_module("stage" + std::to_string(s + 1),
                                  std::make_unique<Stage>(in, widths[s], s == 0 ? 4 : 2, rng)));
    in = widths[s];
  }
}

BackboneFeatures ReferenceConvBackbone::forward(const Var& images) {
  BackboneFeatures f;
  Var x = images;
  for (int s = 0; s < 4; ++s) {
    x = stages_[s]->forward(x);
    f.stages[s] = x;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Twins-SVT style backbone

SvtPreset svt_preset(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::SvtSmall: return {{8, 16, 32, 64}, {2, 2, 4, 2}, {1, 2, 4, 8}, {8, 4, 2, 1}};
    case BackboneKind::SvtBase: return {{12, 24, 48, 96}, {2, 2, 6, 2}, {1, 2, 4, 8}, {8, 4, 2, 1}};
    case BackboneKind::SvtLarge: return {{16, 32, 64, 128}, {2, 2, 6, 2}, {1, 2, 4, 8}, {8, 4, 2, 1}};
    case BackboneKind::ReferenceConv: break;
  }
  fail_validation("reference-conv has no SVT preset");
}

namespace {

Conv2d::Options proj_opts() { return {.kernel = 1, .init = InitScheme::TruncNormal02}; }

// Largest window <= preferred that tiles both dimensions.
int window_size(int h, int w, int preferred) {
  for (int ws = preferred; ws > 1; --ws)
    if (h % ws == 0 && w % ws == 0) return ws;
  return 1;
}

using IndexPtr = std::shared_ptr<const std::vector<std::size_t>>;

// (N,C,H,W) <-> (N*nW, C, ws*ws)
std::pair<IndexPtr, IndexPtr> window_indices(int N, int C, int H, int W, int ws) {
  const int ny = H / ws, nx = W / ws, L = ws * ws;
  auto fwd = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(N) * C * H * W);
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
  for (int n = 0; n < N; ++n)
    for (int wy = 0; wy < ny; ++wy)
      for (int wx = 0; wx < nx; ++wx)
        for (int c = 0; c < C; ++c)
          for (int iy = 0; iy < ws; ++iy)
            for (int ix = 0; ix < ws; ++ix) {
              const std::size_t b = (static_cast<std::size_t>(n) * ny + wy) * nx + wx;
              const std::size_t win = (b * C + c) * L + iy * ws + ix;
              const std::size_t img =
                  ((static_cast<std::size_t>(n) * C + c) * H + wy * ws + iy) * W + wx * ws + ix;
              (*fwd)[win] = img;
              (*inv)[img] = win;
            }
  return {fwd, inv};
}

class LocalAttention : public Module {
 public:
  LocalAttention(int dim, int heads, int window, std::mt19937_64& rng) : heads_(heads), window_(window) {
    q_ = &add_module("q", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
    k_ = &add_module("k", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
    v_ = &add_module("v", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
    proj_ = &add_module("proj", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
  }

  Var forward(const Var& x) {
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    const int ws = window_size(H, W, window_);
    auto key = std::make_tuple(N, C, H, W);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, window_indices(N, C, H, W, ws)).first;
    const auto& [fwd, inv] = it->second;
    const Shape win_shape{N * (H / ws) * (W / ws), C, ws * ws};
    Var q = ops::gather(q_->forward(x), fwd, win_shape);
    Var k = ops::gather(k_->forward(x), fwd, win_shape);
    Var v = ops::gather(v_->forward(x), fwd, win_shape);
    Var o = ops::gather(ops::attention(q, k, v, heads_), inv, x.shape());
    return proj_->forward(o);
  }

 private:
  Conv2d *q_, *k_, *v_, *proj_;
  int heads_, window_;
  std::map<std::tuple<int, int, int, int>, std::pair<IndexPtr, IndexPtr>> cache_;
};

class GlobalSubsampledAttention : public Module {
 public:
  GlobalSubsampledAttention(int dim, int heads, int sr, std::mt19937_64& rng) : heads_(heads), sr_(sr) {
    q_ = &add_module("q", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
    if (sr > 1) {
      Conv2d::Options o{.kernel = sr, .stride = sr, .init = InitScheme::TruncNormal02};
      reduce_ = &add_module("sr", std::make_unique<Conv2d>(dim, dim, o, rng));
      norm_ = &add_module("norm", std::make_unique<LayerNorm2d>(dim));
    }
    k_ = &add_module("k", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
    v_ = &add_module("v", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
    proj_ = &add_module("proj", std::make_unique<Conv2d>(dim, dim, proj_opts(), rng));
  }

  Var forward(const Var& x) {
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    Var kv_src = x;
    if (reduce_ && H % sr_ == 0 && W % sr_ == 0 && H >= sr_) kv_src = norm_->forward(reduce_->forward(x));
    const int L = kv_src.value().dim(2) * kv_src.value().dim(3);
    Var q = ops::reshape(q_->forward(x), {N, C, H * W});
    Var k = ops::reshape(k_->forward(kv_src), {N, C, L});
    Var v = ops::reshape(v_->forward(kv_src), {N, C, L});
    Var o = ops::reshape(ops::attention(q, k, v, heads_), {N, C, H, W});
    return proj_->forward(o);
  }

 private:
  Conv2d *q_, *k_, *v_, *proj_;
  Conv2d* reduce_ = nullptr;
  LayerNorm2d* norm_ = nullptr;
  int heads_, sr_;
};

class Mlp : public Module {
 public:
  Mlp(int dim, int ratio, std::mt19937_64& rng) {
    fc1_ = &add_module("fc1", std::make_unique<Conv2d>(dim, dim * ratio, proj_opts(), rng));
    fc2_ = &add_module("fc2", std::make_unique<Conv2d>(dim * ratio, dim, proj_opts(), rng));
  }
  Var forward(const Var& x) { return fc2_->forward(ops::gelu(fc1_->forward(x))); }

 private:
  Conv2d *fc1_, *fc2_;
};

class SvtBlock : public Module {
 public:
  SvtBlock(int dim, int heads, bool local, int window, int sr, int mlp_ratio, std::mt19937_64& rng) {
    norm1_ = &add_module("norm1", std::make_unique<LayerNorm2d>(dim));
    if (local)
      local_ = &add_module("attn", std::make_unique<LocalAttention>(dim, heads, window, rng));
    else
      global_ = &add_module("attn", std::make_unique<GlobalSubsampledAttention>(dim, heads, sr, rng));
    norm2_ = &add_module("norm2", std::make_unique<LayerNorm2d>(dim));
    mlp_ = &add_module("mlp", std::make_unique<Mlp>(dim, mlp_ratio, rng));
  }

  Var forward(const Var& x) {
    Var h = norm1_->forward(x);
    Var y = ops::add(x, local_ ? local_->forward(h) : global_->forward(h));
    return ops::add(y, mlp_->forward(norm2_->forward(y)));
  }

 private:
  LayerNorm2d *norm1_, *norm2_;
  LocalAttention* local_ = nullptr;
  GlobalSubsampledAttention* global_ = nullptr;
  Mlp* mlp_;
};

}  // namespace

struct TwinsSvtBackbone::Stage : Module {
  Conv2d* embed;
  LayerNorm2d* embed_norm;
  Conv2d* peg;  // depthwise 3x3 position encoding
  std::vector<SvtBlock*> blocks;

  Stage(int in, int dim, int patch, int depth, int heads, int window, int sr, int mlp_ratio, std::mt19937_64& rng) {
    embed = &add_module("embed", std::make_unique<Conv2d>(in, dim, Conv2d::Options{.kernel = patch, .stride = patch}, rng));
    embed_norm = &add_module("embed_norm", std::make_unique<LayerNorm2d>(dim));
    peg = &add_module("peg", std::make_unique<Conv2d>(
                                 dim, dim, Conv2d::Options{.kernel = 3, .padding = 1, .groups = dim}, rng));
    for (int b = 0; b < depth; ++b)
      blocks.push_back(&add_module("block" + std::to_string(b),
                                   std::make_unique<SvtBlock>(dim, heads, b % 2 == 0, window, sr, mlp_ratio, rng)));
  }

  Var forward(const Var& x) {
    Var y = embed_norm->forward(embed->forward(x));
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      y = blocks[b]->forward(y);
      if (b == 0) y = ops::add(y, peg->forward(y));
    }
    return y;
  }
};

TwinsSvtBackbone::TwinsSvtBackbone(const SvtPreset& preset, std::mt19937_64& rng) : preset_(preset) {
  int in = 3;
  for (int s = 0; s < 4; ++s) {
    stages_.push_back(&add_module(
        "stage" + std::to_string(s + 1),
        std::make_unique<Stage>(in, preset.widths[s], s == 0 ? 4 : 2, preset.depths[s], preset.heads[s],
                                preset.window, preset.sr_ratios[s], preset.mlp_ratio, rng)));
    in = preset.widths[s];
  }
}

BackboneFeatures TwinsSvtBackbone::forward(const Var& images) {
  BackboneFeatures f;
  Var x = images;
  for (int s = 0; s < 4; ++s) {
    x = stages_[s]->forward(x);
    f.stages[s] = x;
  }
  return f;
}

std::unique_ptr<Backbone> make_backbone(const ModelConfig& config, std::mt19937_64& rng) {
  if (config.backbone == BackboneKind::ReferenceConv)
    return std::make_unique<ReferenceConvBackbone>(config.reference_widths, rng);
  return std::make_unique<TwinsSvtBackbone>(svt_preset(config.backbone), rng);
}

// ---------------------------------------------------------------------------
// Decoders and heads

DilatedRow::DilatedRow(int in_channels, int channels, int dilation, std::mt19937_64& rng) : dilation_(dilation) {
  reduce_ = &add_module("reduce", std::make_unique<Conv2d>(in_channels, channels, Conv2d::Options{.kernel = 1, .bias = false}, rng));
  bn_ = &add_module("bn", std::make_unique<BatchNorm2d>(channels));
  dilated_ = &add_module(
      "dilated",
      std::make_unique<Conv2d>(channels, channels,
                               Conv2d::Options{.kernel = 3, .padding = dilation, .dilation = dilation}, rng));
}

Var DilatedRow::forward(const Var& x) { return dilated_->forward(ops::relu(bn_->forward(reduce_->forward(x)))); }

ScaleAwareModule::ScaleAwareModule(const std::array<int, 4>& stage_widths, std::vector<int> stages,
                                   std::vector<int> dilations, int channels, std::mt19937_64& rng)
    : stages_(std::move(stages)), dilations_(std::move(dilations)) {
  for (int s : stages_) {
    if (s < 0 || s > 3) fail_validation("scale-aware module: stage index out of range");
    std::vector<DilatedRow*> rows;
    for (std::size_t r = 0; r < dilations_.size(); ++r)
      rows.push_back(&add_module("stage" + std::to_string(s + 1) + ".row" + std::to_string(r),
                                 std::make_unique<DilatedRow>(stage_widths[s], channels, dilations_[r], rng)));
    rows_.push_back(std::move(rows));
  }
}

Var ScaleAwareModule::forward(const BackboneFeatures& feats, int out_h, int out_w) {
  Var fused;
  for (std::size_t slot = 0; slot < stages_.size(); ++slot) {
    const Var& x = feats.stages[stages_[slot]];
    Var acc;
    for (DilatedRow* row : rows_[slot]) {
      Var y = row->forward(x);
      acc = acc.defined() ? ops::add(acc, y) : y;
    }
    acc = ops::resize_bilinear(acc, out_h, out_w);
    fused = fused.defined() ? ops::add(fused, acc) : acc;
  }
  return fused;
}

CountingHead::CountingHead(int channels, int num_classes, double beta, std::mt19937_64& rng) : beta_(beta) {
  conv_ = &add_module("conv", std::make_unique<Conv2d>(channels, channels, Conv2d::Options{.kernel = 3, .padding = 1}, rng));
  project_ = &add_module("project", std::make_unique<Conv2d>(
                                        channels, num_classes, Conv2d::Options{.kernel = 1, .init = InitScheme::TruncNormal02}, rng));
  // Start near a sparse-scene density so the first steps do not collapse the softplus.
  project_->bias().mutable_value().fill(std::log(std::expm1(beta * kInitialDensity)) / beta);
}

Var CountingHead::forward(const Var& feats) {
  return ops::softplus(project_->forward(ops::relu(conv_->forward(feats))), beta_);
}

MaskingHead::MaskingHead(int channels, int num_classes, std::mt19937_64& rng) {
  project_ = &add_module("project", std::make_unique<Conv2d>(channels, 2 * num_classes, Conv2d::Options{.kernel = 1}, rng));
}

Var MaskingHead::forward(const Var& feats) { return project_->forward(feats); }

// ---------------------------------------------------------------------------

CountingModel::CountingModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  auto bb = make_backbone(config_, rng);
  const auto widths = bb->widths();
  backbone_ = &add_module("backbone", std::move(bb));
  const int D = config_.decoder_channels;
  mam_ = &add_module("mam", std::make_unique<ScaleAwareModule>(widths, std::vector<int>{0, 1, 2, 3},
                                                               std::vector<int>{1, 2, 3}, D, rng));
  counting_head_ = &add_module("counting_head",
                               std::make_unique<CountingHead>(D, config_.num_classes, config_.softplus_beta, rng));
  if (config_.cfm_mode != CfmMode::Off) {
    std::vector<int> stages = config_.cfm_mode == CfmMode::SingleScale ? std::vector<int>{3} : std::vector<int>{0, 1, 2, 3};
    cfm_ = &add_module("cfm", std::make_unique<ScaleAwareModule>(widths, std::move(stages),
                                                                 std::vector<int>{1, 2, 3, 4}, D, rng));
    masking_head_ = &add_module("masking_head", std::make_unique<MaskingHead>(D, config_.num_classes, rng));
  }
}

Var cfm_forward(CountingModel& model, const BackboneFeatures& feats, int out_h, int out_w) {
  if (!model.cfm()) fail_validation("cfm_forward called with cfm_mode off; skip the masking branch instead");
  return model.cfm()->forward(feats, out_h, out_w);
}

ModelOutput CountingModel::forward(const Var& images, Phase phase) {
  if (images.value().ndim() != 4 || images.value().dim(1) != 3)
    fail_validation("model input must be (N,3,H,W), got " + shape_str(images.shape()));
  const int H = images.value().dim(2), W = images.value().dim(3);
  require_divisible_by_32(H, W);
  const int oh = H / config_.output_stride, ow = W / config_.output_stride;

  std::optional<NoGradGuard> no_grad;
  if (phase == Phase::Infer) no_grad.emplace();
  set_training(phase == Phase::Train);

  ModelOutput out;
  const BackboneFeatures feats = backbone_->forward(images);
  ++trace_.backbone_calls;

  ++trace_.counting_branch_calls;
  trace_.counting_input = &feats;
  out.density = counting_head_->forward(mam_->forward(feats, oh, ow));

  if (phase == Phase::Train && cfm_) {
    ++trace_.masking_branch_calls;
    trace_.masking_input = &feats;
    out.mask_logits = masking_head_->forward(cfm_forward(*this, feats, oh, ow));
  }
  return out;
}

}  // namespace mcc
