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

// The multi-class counting network.
//
//   image -> Backbone (4 stages, strides 4/8/16/32)
//         -> ScaleAwareModule, dilations {1,2,3}      -> CountingHead -> density (softplus)
//         -> ScaleAwareModule, dilations {1,2,3,4}    -> MaskingHead  -> 2C logits  (train only)
//
// Both decoders read the same BackboneFeatures. The second decoder is the
// category focus branch; it consumes every stage ("multiscale") or only the
// stride-32 stage ("single_scale"), and is absent when cfm_mode is off.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcc/layers.hpp"

namespace mcc {

enum class BackboneKind { ReferenceConv, SvtSmall, SvtBase, SvtLarge };
enum class CfmMode { Off, SingleScale, Multiscale };
enum class Phase { Train, Infer };

std::string to_string(BackboneKind kind);
std::string to_string(CfmMode mode);
BackboneKind parse_backbone_kind(const std::string& s);
CfmMode parse_cfm_mode(const std::string& s);

inline constexpr std::array<int, 4> kStageStrides{4, 8, 16, 32};

struct ModelConfig {
  int num_classes = 1;
  BackboneKind backbone = BackboneKind::ReferenceConv;
  CfmMode cfm_mode = CfmMode::Multiscale;
  int output_stride = 4;
  double softplus_beta = 1.0;
  double w_r = 1.0;
  int decoder_channels = 16;
  std::array<int, 4> reference_widths{8, 16, 32, 64};  // reference-conv only

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct BackboneFeatures {
  std::array<Var, 4> stages;
};

class Backbone : public Module {
 public:
  virtual BackboneFeatures forward(const Var& images) = 0;
  virtual std::array<int, 4> widths() const = 0;
};

/// Plain convolution pyramid: per stage a patchifying strided conv and a
/// 3x3 conv, each followed by batch norm and ReLU.
class ReferenceConvBackbone : public Backbone {
 public:
  ReferenceConvBackbone(std::array<int, 4> widths, std::mt19937_64& rng);
  BackboneFeatures forward(const Var& images) override;
  std::array<int, 4> widths() const override { return widths_; }

 private:
  struct Stage;
  std::array<int, 4> widths_;
  std::vector<Stage*> stages_;
};

struct SvtPreset {
  std::array<int, 4> widths;
  std::array<int, 4> depths;
  std::array<int, 4> heads;
  std::array<int, 4> sr_ratios;
  int mlp_ratio = 4;
  int window = 4;
};

/// Toy-scale presets for the three Twins-SVT sizes.
SvtPreset svt_preset(BackboneKind kind);

/// Twins-SVT style pyramid: patch embedding per stage, then blocks that
/// alternate locally-grouped (windowed) attention and global sub-sampled
/// attention, each followed by an MLP, with a depthwise-conv position
/// generator after the first block of every stage.
class TwinsSvtBackbone : public Backbone {
 public:
  TwinsSvtBackbone(const SvtPreset& preset, std::mt19937_64& rng);
  BackboneFeatures forward(const Var& images) override;
  std::array<int, 4> widths() const override { return preset_.widths; }

 private:
  struct Stage;
  SvtPreset preset_;
  std::vector<Stage*> stages_;
};

std::unique_ptr<Backbone> make_backbone(const ModelConfig& config, std::mt19937_64& rng);

/// One Conv1x1 -> BN -> ReLU -> Conv3x3(dilated) row.
class DilatedRow : public Module {
 public:
  DilatedRow(int in_channels, int channels, int dilation, std::mt19937_64& rng);
  Var forward(const Var& x);
  int dilation() const { return dilation_; }

 private:
  Conv2d* reduce_;
  BatchNorm2d* bn_;
  Conv2d* dilated_;
  int dilation_;
};

/// Parallel dilated rows per consumed stage; row outputs are summed,
/// resized to the output grid and summed across stages.
class ScaleAwareModule : public Module {
 public:
  ScaleAwareModule(const std::array<int, 4>& stage_widths, std::vector<int> stages, std::vector<int> dilations,
                   int channels, std::mt19937_64& rng);
  Var forward(const BackboneFeatures& feats, int out_h, int out_w);

  const std::vector<int>& consumed_stages() const { return stages_; }
  const std::vector<int>& dilations() const { return dilations_; }
  DilatedRow& row(std::size_t stage_slot, std::size_t r) { return *rows_.at(stage_slot).at(r); }

 private:
  std::vector<int> stages_;
  std::vector<int> dilations_;
  std::vector<std::vector<DilatedRow*>> rows_;
};

class CountingHead : public Module {
 public:
  static constexpr double kInitialDensity = 0.01;

  CountingHead(int channels, int num_classes, double beta, std::mt19937_64& rng);
  Var forward(const Var& feats);

 private:
  Conv2d* conv_;
  Conv2d* project_;
  double beta_;
};

class MaskingHead : public Module {
 public:
  MaskingHead(int channels, int num_classes, std::mt19937_64& rng);
  Var forward(const Var& feats);

 private:
  Conv2d* project_;
};

/// Execution counters and the identity of the feature objects each branch read.
struct ForwardTrace {
  std::uint64_t backbone_calls = 0;
  std::uint64_t counting_branch_calls = 0;
  std::uint64_t masking_branch_calls = 0;
  const BackboneFeatures* counting_input = nullptr;
  const BackboneFeatures* masking_input = nullptr;
};

struct ModelOutput {
  Var density;                    // (N,C,H/s,W/s), strictly positive
  std::optional<Var> mask_logits;  // (N,2C,H/s,W/s), train phase with CFM only
};

class CountingModel : public Module {
 public:
  CountingModel(ModelConfig config, std::uint64_t seed);

  /// images: (N,3,H,W) with H, W divisible by 32. Infer phase uses running
  /// batch-norm statistics, records no graph and never touches the masking branch.
  ModelOutput forward(const Var& images, Phase phase);

  const ModelConfig& config() const { return config_; }
  Backbone& backbone() { return *backbone_; }
  ScaleAwareModule& mam() { return *mam_; }
  ScaleAwareModule* cfm() { return cfm_; }
  CountingHead& counting_head() { return *counting_head_; }
  MaskingHead* masking_head() { return masking_head_; }

  const ForwardTrace& trace() const { return trace_; }
  void reset_trace() { trace_ = {}; }

 private:
  ModelConfig config_;
  Backbone* backbone_ = nullptr;
  ScaleAwareModule* mam_ = nullptr;
  ScaleAwareModule* cfm_ = nullptr;
  CountingHead* counting_head_ = nullptr;
  MaskingHead* masking_head_ = nullptr;
  ForwardTrace trace_;
};

/// Runs the category-focus decoder. Throws ValidationError when the model
/// was built with cfm_mode off.
Var cfm_forward(CountingModel& model, const BackboneFeatures& feats, int out_h, int out_w);

void require_divisible_by_32(int height, int width);

// Checkpoint container: "MCKP", version byte, u32 length + config JSON,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// u32 dims, float32 LE values.
void save_checkpoint(CountingModel& model, const std::filesystem::path& path, const nlohmann::json& metadata = {});
struct LoadedCheckpoint {
  std::unique_ptr<CountingModel> model;
  nlohmann::json metadata;
};
/// When expected is given, its num_classes must match before weights are assigned.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace mcc
