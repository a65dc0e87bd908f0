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

// Training, evaluation, gradient checking and heatmap rendering.
//
// TrainConfig JSON:
//   {"model": {...ModelConfig...},
//    "optimizer": {"method": "adamw", "lr": 1e-4, "weight_decay": 1e-4, "min_lr": 1e-6},
//    "batch_size": 4, "epochs": 10, "seed": 0,
//    "loss": {"w_r": 1.0, "regional": true},
//    "gt": {"sigma": 4.0},
//    "eval_ranges": "0:10,11:50"}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcc/data_ingest.hpp"
#include "mcc/losses.hpp"
#include "mcc/metrics.hpp"
#include "mcc/model.hpp"

namespace mcc {

struct OptimizerConfig {
  std::string method = "adamw";  // "adamw" or "sgd"
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double min_lr = 1e-6;  // cosine schedule floor
  double momentum = 0.9;  // sgd only
};

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  int batch_size = 4;
  int epochs = 10;
  std::uint64_t seed = 0;
  LossConfig loss;
  double sigma = 4.0;
  std::vector<CountRange> eval_ranges;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Per-item ground-truth maps at the model's output stride, computed once and
/// cached in memory and, when MC_CACHE_DIR is set, as DMAP files keyed by
/// sigma, stride and the manifest hash.
class GtCache {
 public:
  GtCache(const DatasetManifest& manifest, GtConfig config);
  const DensityMap& at(std::size_t item) const { return maps_.at(item); }
  std::size_t disk_hits() const { return disk_hits_; }

 private:
  std::vector<DensityMap> maps_;
  std::size_t disk_hits_ = 0;
};

struct LogRecord {
  int epoch = 0;
  std::int64_t step = 0;
  std::string batch;  // item ids in the batch
  LossBreakdown loss;
  double lr = 0;
  std::optional<double> val_mae;  // set on the last step of each epoch
  std::optional<double> val_rmse;
};

nlohmann::json to_json(const LogRecord& record);

struct TrainOptions {
  std::filesystem::path checkpoint;  // written whenever validation macro-MAE improves; empty = keep in memory only
  std::filesystem::path log;         // JSONL; empty = no file
  std::function<void(const LogRecord&)> on_record;
};

struct TrainResult {
  std::unique_ptr<CountingModel> model;       // weights after the final epoch
  std::unique_ptr<CountingModel> best_model;  // weights with the lowest validation macro-MAE
  double best_val_mae = 0;
  int best_epoch = -1;
  std::vector<LogRecord> log;
};

TrainResult train(const TrainConfig& config, const DatasetManifest& train_set, const DatasetManifest& val_set,
                  const TrainOptions& options = {});

/// Inference-phase density maps, one per item.
std::vector<DensityMap> predict(CountingModel& model, const DatasetManifest& manifest);
std::vector<CountSample> predict_counts(CountingModel& model, const DatasetManifest& manifest);

/// Bucketed and per-class report over already-paired counts.
RangeReport evaluate_samples(std::span<const CountSample> samples, std::span<const CountRange> ranges,
                             std::span<const std::string> class_names);
RangeReport evaluate(CountingModel& model, const DatasetManifest& manifest, std::span<const CountRange> ranges);
/// Throws ValidationError when the checkpoint's class count differs from the manifest's.
RangeReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const DatasetManifest& manifest,
                                std::span<const CountRange> ranges);

struct GradcheckResult {
  double max_rel_err = 0;
  std::string worst;  // "<parameter>[<flat index>]"
  std::size_t checked = 0;
  std::size_t step_reductions = 0;  // retries after a step crossed a ReLU kink
  std::size_t one_sided = 0;        // entries measured with a one-sided stencil
};

/// A scalar function of the tensors in params. value() must recompute from
/// their current contents; analytic() returns d(value)/d(param) per entry of
/// params (an empty tensor means zero).
struct GradcheckProblem {
  std::vector<std::pair<std::string, Tensor*>> params;
  std::function<double()> value;
  std::function<std::vector<Tensor>()> analytic;
};

/// Central differences; when either side of a step lands on a different ReLU
/// sign pattern than the base point, the step shrinks tenfold (not below
/// min_step) so every evaluation stays on the same smooth piece.
struct GradcheckOptions {
  double step = 1e-5;
  double min_step = 1e-10;
  double floor = 1e-8;  // denominator floor for near-zero gradients
  std::size_t max_entries_per_param = 0;  // 0 = every entry
  std::uint64_t seed = 0;  // picks entries when sampling
  // Fourth-order central stencil; below the initial step a kink on one side
  // falls back to a one-sided second-order stencil on the other.
  bool five_point = false;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor), maximised over entries.
GradcheckResult gradcheck_problem(const GradcheckProblem& problem, const GradcheckOptions& options = {});

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"losses", "counting_head", "mam", "cfm", "full"};
  return names;
}
GradcheckResult gradcheck(const std::string& component, std::uint64_t seed);
/// Pass threshold per component.
double gradcheck_threshold(const std::string& component);

/// Writes <id>_c<k>_<class>_<count>.png per class (count to 2 decimals) and
/// <id>_composite.png (input next to the per-class heatmaps). Returns the paths.
std::vector<std::filesystem::path> render_heatmaps(const DensityMap& density, const Image& input,
                                                   std::span<const std::string> class_names, const std::string& item_id,
                                                   const std::filesystem::path& out_dir);
std::vector<std::filesystem::path> render_heatmaps(CountingModel& model, const DatasetManifest& manifest,
                                                   std::size_t item, const std::filesystem::path& out_dir);

/// (1,3,H,W) batch tensor from an image.
Tensor image_tensor(const Image& image);

}  // namespace mcc
