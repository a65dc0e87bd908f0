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

#include "mcc/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mcc/autograd.hpp"
#include "mcc/error.hpp"
#include "random.hpp"

namespace fs = std::filesystem;

namespace mcc {

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string format_ranges(const std::vector<CountRange>& ranges) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (i) os << ',';
    os << ranges[i].lo << ':' << ranges[i].hi;
  }
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (optimizer.method != "adamw" && optimizer.method != "sgd")
    fail_validation("optimizer.method must be 'adamw' or 'sgd', got '" + optimizer.method + "'");
  if (!(optimizer.lr > 0)) fail_validation("optimizer.lr must be > 0");
  if (!(optimizer.weight_decay >= 0)) fail_validation("optimizer.weight_decay must be >= 0");
  if (!(optimizer.min_lr >= 0) || optimizer.min_lr > optimizer.lr)
    fail_validation("optimizer.min_lr must lie in [0, lr]");
  if (!(optimizer.momentum >= 0 && optimizer.momentum < 1)) fail_validation("optimizer.momentum must lie in [0, 1)");
  if (batch_size < 1) fail_validation("batch_size must be >= 1");
  if (epochs < 1) fail_validation("epochs must be >= 1");
  if (!(loss.w_r >= 0)) fail_validation("loss.w_r must be >= 0");
  if (!(sigma > 0)) fail_validation("gt.sigma must be > 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"optimizer",
           {{"method", c.optimizer.method},
            {"lr", c.optimizer.lr},
            {"weight_decay", c.optimizer.weight_decay},
            {"min_lr", c.optimizer.min_lr},
            {"momentum", c.optimizer.momentum}}},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"loss", {{"w_r", c.loss.w_r}, {"regional", c.loss.regional}}},
          {"gt", {{"sigma", c.sigma}}},
          {"eval_ranges", format_ranges(c.eval_ranges)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (!j.is_object()) fail_validation("train config must be a JSON object");
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.optimizer.method = o.value("method", c.optimizer.method);
      c.optimizer.lr = o.value("lr", c.optimizer.lr);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
      c.optimizer.min_lr = o.value("min_lr", std::min(c.optimizer.min_lr, c.optimizer.lr));
      c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.loss.w_r = c.model.w_r;
    if (j.contains("loss")) {
      c.loss.w_r = j.at("loss").value("w_r", c.loss.w_r);
      c.loss.regional = j.at("loss").value("regional", c.loss.regional);
    }
    c.model.w_r = c.loss.w_r;
    if (j.contains("gt")) c.sigma = j.at("gt").value("sigma", c.sigma);
    if (j.contains("eval_ranges")) {
      const std::string text = j.at("eval_ranges").get<std::string>();
      if (!text.empty()) c.eval_ranges = parse_ranges(text);
    }
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const LogRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"batch", r.batch},
          {"l2_positive", r.loss.l2_positive},
          {"l2_background", r.loss.l2_background},
          {"mask_ce", r.loss.mask_ce},
          {"total", r.loss.total},
          {"lr", r.lr},
          {"val_mae", opt(r.val_mae)},
          {"val_rmse", opt(r.val_rmse)}};
}

// ---------------------------------------------------------------------------
// Ground-truth cache

GtCache::GtCache(const DatasetManifest& m, GtConfig config) {
  fs::path dir;
  if (const char* env = std::getenv("MC_CACHE_DIR"); env && *env) {
    char key[96];
    std::snprintf(key, sizeof key, "gt_%016llx_s%g_k%d", static_cast<unsigned long long>(manifest_hash(m)), config.sigma,
                  config.stride);
    dir = fs::path(env) / key;
  }
  maps_.reserve(m.items.size());
  for (std::size_t i = 0; i < m.items.size(); ++i) {
    const fs::path file = dir.empty() ? fs::path() : dir / (std::to_string(i) + ".dmap");
    if (!file.empty() && fs::exists(file)) {
      maps_.push_back(read_dmap(file));
      ++disk_hits_;
      continue;
    }
    maps_.push_back(build_ground_truth(m.items[i].ann, m.num_classes(), config));
    if (!file.empty()) write_dmap(maps_.back(), file);
  }
}

// ---------------------------------------------------------------------------
// Helpers

Tensor image_tensor(const Image& image) {
  Tensor t({1, 3, image.height, image.width});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = image.pixels[i];
  return t;
}

namespace {

DensityMap slice_map(const Tensor& batch, int n, int scale) {
  const int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  DensityMap m(C, H, W, scale);
  const std::size_t per = static_cast<std::size_t>(C) * H * W;
  std::copy_n(batch.data() + n * per, per, m.raster.data());
  return m;
}

Tensor slice_tensor(const Tensor& batch, int n) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor t(s);
  std::copy_n(batch.data() + n * t.numel(), t.numel(), t.data());
  return t;
}

void copy_weights(CountingModel& src, CountingModel& dst) {
  auto sp = src.named_parameters();
  auto dp = dst.named_parameters();
  for (std::size_t i = 0; i < sp.size(); ++i) dp[i].var.mutable_value() = sp[i].var.value();
  auto sb = src.named_buffers();
  auto db = dst.named_buffers();
  for (std::size_t i = 0; i < sb.size(); ++i) *db[i].tensor = *sb[i].tensor;
}

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, std::vector<NamedParameter> params) : cfg_(cfg), params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = cfg_.method == "sgd" ? cfg_.momentum : 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var& var = params_[k].var;
      const Tensor& g = var.grad();
      Tensor& w = var.mutable_value();
      const bool decay = w.ndim() >= 2;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double gi = g.empty() ? 0.0 : g[i];
        if (cfg_.method == "sgd") {
          const double gd = gi + (decay ? cfg_.weight_decay * w[i] : 0.0);
          m_[k][i] = b1 * m_[k][i] + gd;
          w[i] -= lr * m_[k][i];
        } else {
          if (decay) w[i] -= lr * cfg_.weight_decay * w[i];
          m_[k][i] = b1 * m_[k][i] + (1 - b1) * gi;
          v_[k][i] = b2 * v_[k][i] + (1 - b2) * gi * gi;
          w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps);
        }
      }
      var.zero_grad();
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<NamedParameter> params_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

double cosine_lr(const OptimizerConfig& o, std::int64_t step, std::int64_t total) {
  if (total <= 1) return o.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return o.min_lr + 0.5 * (o.lr - o.min_lr) * (1 + std::cos(std::numbers::pi * t));
}

// Consecutive items of the shuffled order that share an image size.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, const std::vector<Image>& images,
                                                   int batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  std::map<std::pair<int, int>, std::vector<std::size_t>> pending;
  std::vector<std::pair<int, int>> first_seen;
  for (std::size_t i : order) {
    const auto key = std::make_pair(images[i].height, images[i].width);
    auto [it, inserted] = pending.try_emplace(key);
    if (inserted) first_seen.push_back(key);
    it->second.push_back(i);
    if (static_cast<int>(it->second.size()) == batch_size) {
      batches.push_back(std::move(it->second));
      it->second.clear();
    }
  }
  for (const auto& key : first_seen)
    if (!pending[key].empty()) batches.push_back(pending[key]);
  return batches;
}

struct Batch {
  std::int64_t id = 0;
  std::vector<std::size_t> items;
  Tensor images;
  std::vector<RegionMask> masks;
  std::vector<SegTarget> targets;
};

template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return q_.size() < capacity_ || closed_; });
    if (closed_) return;
    q_.push_back(std::move(value));
    not_empty_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<T> q_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  bool closed_ = false;
};

Batch assemble(std::int64_t id, const std::vector<std::size_t>& items, const std::vector<Image>& images,
               const GtCache& gt) {
  Batch b;
  b.id = id;
  b.items = items;
  const Image& first = images[items[0]];
  b.images = Tensor({static_cast<int>(items.size()), 3, first.height, first.width});
  const std::size_t per = first.pixels.size();
  for (std::size_t n = 0; n < items.size(); ++n) {
    const Image& im = images[items[n]];
    for (std::size_t i = 0; i < per; ++i) b.images[n * per + i] = im.pixels[i];
    b.masks.push_back(build_region_masks(gt.at(items[n])));
    b.targets.push_back(build_segmentation_target(gt.at(items[n])));
  }
  return b;
}

std::vector<Image> load_images(const DatasetManifest& m) {
  std::vector<Image> images;
  images.reserve(m.items.size());
  for (const auto& it : m.items) {
    images.push_back(item_image(m, it));
    if (images.back().width != it.ann.width || images.back().height != it.ann.height)
      fail_validation("image size of '" + it.ann.image_id + "' does not match its annotation");
    require_divisible_by_32(it.ann.height, it.ann.width);
  }
  return images;
}

std::vector<CountVector> gt_counts(const DatasetManifest& m) {
  std::vector<CountVector> out;
  for (const auto& it : m.items) {
    const auto counts = class_box_counts(it.ann, m.num_classes());
    out.emplace_back(counts.begin(), counts.end());
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training

TrainResult train(const TrainConfig& config, const DatasetManifest& train_set, const DatasetManifest& val_set,
                  const TrainOptions& options) {
  config.validate();
  if (train_set.items.empty()) fail_validation("training manifest is empty");
  if (val_set.items.empty()) fail_validation("validation manifest is empty");
  const int C = config.model.num_classes;
  if (train_set.num_classes() != C || val_set.num_classes() != C)
    fail_validation("manifest category count does not match model num_classes=" + std::to_string(C));

  const std::vector<Image> images = load_images(train_set);
  const GtCache gt(train_set, GtConfig{config.sigma, config.model.output_stride});
  const std::vector<CountVector> val_gt = gt_counts(val_set);

  TrainResult result;
  ModelConfig mc = config.model;
  mc.w_r = config.loss.w_r;
  result.model = std::make_unique<CountingModel>(mc, config.seed);
  result.best_model = std::make_unique<CountingModel>(mc, config.seed);
  CountingModel& model = *result.model;
  Optimizer opt(config.optimizer, model.named_parameters());

  std::ofstream log_file;
  if (!options.log.empty()) {
    if (options.log.has_parent_path()) fs::create_directories(options.log.parent_path());
    log_file.open(options.log);
    if (!log_file) fail_runtime("cannot open training log " + options.log.string());
  }

  std::mt19937_64 rng(config.seed ^ 0x5eed5eed5eed5eedull);
  std::vector<std::size_t> order(train_set.items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(make_batches(order, images, config.batch_size).size());
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  std::int64_t step = 0;
  double best = INFINITY;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    detail::shuffle(order, rng);
    const auto batches = make_batches(order, images, config.batch_size);

    BoundedQueue<Batch> queue(2);
    std::exception_ptr producer_error;
    std::thread producer([&] {
      try {
        for (std::size_t b = 0; b < batches.size(); ++b)
          queue.push(assemble(step + static_cast<std::int64_t>(b), batches[b], images, gt));
      } catch (...) {
        producer_error = std::current_exception();
      }
      queue.close();
    });

    std::vector<LogRecord> records;
    try {
      while (auto batch = queue.pop()) {
        const int N = static_cast<int>(batch->items.size());
        ModelOutput out = model.forward(Var::constant(batch->images), Phase::Train);
        Tensor d_density(out.density.shape());
        Tensor d_logits;
        if (out.mask_logits) d_logits = Tensor(out.mask_logits->shape());
        LossBreakdown mean;
        std::string ids;
        for (int n = 0; n < N; ++n) {
          const std::size_t item = batch->items[n];
          ids += (n ? "," : "") + train_set.items[item].ann.image_id;
          const DensityMap pred = slice_map(out.density.value(), n, config.model.output_stride);
          Tensor logits;
          if (out.mask_logits) logits = slice_tensor(out.mask_logits->value(), n);
          LossGradients g;
          const LossBreakdown lb = total_loss(pred, gt.at(item), batch->masks[n], out.mask_logits ? &logits : nullptr,
                                              batch->targets[n], config.loss, &g);
          mean.l2_positive += lb.l2_positive / N;
          mean.l2_background += lb.l2_background / N;
          mean.mask_ce += lb.mask_ce / N;
          mean.total += lb.total / N;
          mean.w_r = lb.w_r;
          const std::size_t pd = g.density.numel();
          for (std::size_t i = 0; i < pd; ++i) d_density[n * pd + i] = g.density[i] / N;
          if (out.mask_logits) {
            const std::size_t pl = g.logits.numel();
            for (std::size_t i = 0; i < pl; ++i) d_logits[n * pl + i] = g.logits[i] / N;
          }
        }
        if (!std::isfinite(mean.total))
          fail_runtime("non-finite loss in batch " + std::to_string(batch->id) + " (items " + ids + ")");

        std::vector<std::pair<Var, Tensor>> seeds{{out.density, std::move(d_density)}};
        if (out.mask_logits) seeds.emplace_back(*out.mask_logits, std::move(d_logits));
        backward(seeds);
        const double lr = cosine_lr(config.optimizer, step, total_steps);
        opt.step(lr);

        LogRecord rec;
        rec.epoch = epoch;
        rec.step = step;
        rec.batch = ids;
        rec.loss = mean;
        rec.lr = lr;
        records.push_back(std::move(rec));
        ++step;
      }
    } catch (...) {
      queue.close();
      producer.join();
      throw;
    }
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);

    std::vector<CountVector> preds;
    for (const auto& s : predict_counts(model, val_set)) preds.push_back(s.pred);
    const double val_mae = macro_mae(preds, val_gt);
    const double val_rmse = macro_rmse(preds, val_gt);
    records.back().val_mae = val_mae;
    records.back().val_rmse = val_rmse;

    if (val_mae < best) {
      best = val_mae;
      result.best_epoch = epoch;
      result.best_val_mae = val_mae;
      copy_weights(model, *result.best_model);
      if (!options.checkpoint.empty())
        save_checkpoint(model, options.checkpoint,
                        {{"epoch", epoch},
                         {"val_mae", val_mae},
                         {"val_rmse", val_rmse},
                         {"categories", train_set.categories},
                         {"train_config", to_json(config)}});
    }

    for (const auto& r : records) {
      if (log_file.is_open()) log_file << to_json(r).dump() << "\n";
      if (options.on_record) options.on_record(r);
      result.log.push_back(r);
    }
    if (log_file.is_open()) {
      log_file.flush();
      if (!log_file) fail_runtime("cannot write training log " + options.log.string());
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<DensityMap> predict(CountingModel& model, const DatasetManifest& manifest) {
  std::vector<DensityMap> out;
  out.reserve(manifest.items.size());
  for (const auto& it : manifest.items) {
    const Image img = item_image(manifest, it);
    const ModelOutput o = model.forward(Var::constant(image_tensor(img)), Phase::Infer);
    out.push_back(slice_map(o.density.value(), 0, model.config().output_stride));
  }
  return out;
}

std::vector<CountSample> predict_counts(CountingModel& model, const DatasetManifest& manifest) {
  const auto maps = predict(model, manifest);
  const auto gts = gt_counts(manifest);
  std::vector<CountSample> out;
  for (std::size_t i = 0; i < maps.size(); ++i) out.push_back({class_counts(maps[i]), gts[i]});
  return out;
}

RangeReport evaluate_samples(std::span<const CountSample> samples, std::span<const CountRange> ranges,
                             std::span<const std::string> class_names) {
  RangeReport r = bucketed_report(samples, ranges);
  r.per_class = per_class_report(samples, class_names);
  return r;
}

RangeReport evaluate(CountingModel& model, const DatasetManifest& manifest, std::span<const CountRange> ranges) {
  if (manifest.num_classes() != model.config().num_classes)
    fail_validation("manifest has " + std::to_string(manifest.num_classes()) + " categories, model has " +
                    std::to_string(model.config().num_classes));
  if (manifest.items.empty()) fail_validation("evaluation manifest is empty");
  const auto samples = predict_counts(model, manifest);
  return evaluate_samples(samples, ranges, manifest.categories);
}

RangeReport evaluate_checkpoint(const fs::path& checkpoint, const DatasetManifest& manifest,
                                std::span<const CountRange> ranges) {
  ModelConfig expected;
  expected.num_classes = manifest.num_classes();
  LoadedCheckpoint ck = load_checkpoint(checkpoint, &expected);
  return evaluate(*ck.model, manifest, ranges);
}

// ---------------------------------------------------------------------------
// Gradient checks

GradcheckResult gradcheck_problem(const GradcheckProblem& p, const GradcheckOptions& o) {
  GradcheckResult res;
  if (p.params.empty()) return res;
  const std::vector<Tensor> analytic = p.analytic();
  auto traced_value = [&p] {
    KinkTrace trace;
    const double f = p.value();
    return std::make_pair(f, trace.signature());
  };
  const auto [base_value, base] = traced_value();
  std::mt19937_64 rng(o.seed);
  for (std::size_t k = 0; k < p.params.size(); ++k) {
    Tensor& w = *p.params[k].second;
    std::vector<std::size_t> idx(w.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (o.max_entries_per_param && idx.size() > o.max_entries_per_param) {
      detail::shuffle(idx, rng);
      idx.resize(o.max_entries_per_param);
    }
    for (std::size_t i : idx) {
      const double orig = w[i];
      double h = o.step, numeric = 0;
      for (;;) {
        bool same_piece = true;
        auto at = [&](double offset) {
          w[i] = orig + offset;
          const auto [f, sig] = traced_value();
          same_piece = same_piece && sig == base;
          return f;
        };
        if (!o.five_point) {
          numeric = (at(h) - at(-h)) / (2 * h);
          if (same_piece || h / 10 < o.min_step) break;
          h /= 10;
          ++res.step_reductions;
          continue;
        }
        numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
        if (same_piece || h / 10 < o.min_step) break;
        if (h < o.step) {
          // One-sided second-order stencils on whichever side stays on the base piece.
          bool found = false;
          for (const double dir : {1.0, -1.0}) {
            same_piece = true;
            const double f1 = at(dir * h), f2 = at(dir * 2 * h);
            if (!same_piece) continue;
            numeric = dir * (-3 * base_value + 4 * f1 - f2) / (2 * h);
            ++res.one_sided;
            found = true;
            break;
          }
          if (found) break;
        }
        h /= 10;
        ++res.step_reductions;
      }
      w[i] = orig;
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), o.floor});
      const double err = (a == numeric) ? 0.0 : std::abs(a - numeric) / denom;
      ++res.checked;
      if (res.worst.empty() || err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = p.params[k].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

namespace {

Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * detail::uniform01(rng);
  return t;
}

AnnotationSet random_annotations(std::mt19937_64& rng, int classes, int size, int max_boxes) {
  AnnotationSet a;
  a.image_id = "probe";
  a.width = a.height = size;
  const auto n = detail::uniform_int(rng, 1, max_boxes);
  for (std::int64_t k = 0; k < n; ++k) {
    const double x = detail::uniform01(rng) * (size - 8), y = detail::uniform01(rng) * (size - 8);
    a.boxes.push_back({static_cast<int>(detail::uniform_int(rng, 0, classes - 1)), x, y, x + 4 + 4 * detail::uniform01(rng),
                       y + 4 + 4 * detail::uniform01(rng)});
  }
  return a;
}

std::vector<Tensor> grads_of(const std::vector<NamedParameter>& params) {
  std::vector<Tensor> g;
  for (const auto& p : params) g.push_back(p.var.grad());
  return g;
}

void clear_grads(std::vector<NamedParameter>& params) {
  for (auto& p : params) p.var.zero_grad();
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

GradcheckResult check_losses(std::uint64_t seed) {
  GradcheckResult worst;
  for (bool regional : {true, false}) {
    std::mt19937_64 rng(seed);
    const int C = 2, H = 8, W = 8;
    DensityMap gt(C, H, W);
    for (std::size_t i = 0; i < gt.raster.numel(); ++i)
      gt.raster[i] = detail::uniform01(rng) < 0.5 ? 0.0 : detail::uniform01(rng);
    const RegionMask mask = build_region_masks(gt);
    const SegTarget target = build_segmentation_target(gt);
    auto pred = std::make_shared<DensityMap>(C, H, W);
    pred->raster = random_tensor({C, H, W}, rng, 0.0, 1.0);
    auto logits = std::make_shared<Tensor>(random_tensor({2 * C, H, W}, rng, -2.0, 2.0));
    const LossConfig cfg{regional, 0.7};
    GradcheckProblem p;
    p.params = {{"density", &pred->raster}, {"logits", logits.get()}};
    p.value = [=] { return total_loss(*pred, gt, mask, logits.get(), target, cfg).total; };
    p.analytic = [=] {
      LossGradients g;
      total_loss(*pred, gt, mask, logits.get(), target, cfg, &g);
      return std::vector<Tensor>{g.density, g.logits};
    };
    GradcheckResult r = gradcheck_problem(p, {.step = 1e-4});
    r.worst = std::string(regional ? "regional:" : "l2:") + r.worst;
    const std::size_t checked = worst.checked + r.checked;
    if (r.max_rel_err >= worst.max_rel_err) worst = r;
    worst.checked = checked;
  }
  return worst;
}

// Module-level check: value = <module(inputs), R> for a fixed random R.
template <class Forward>
GradcheckResult check_module(Module& module, std::vector<Var> inputs, Forward forward, std::mt19937_64& rng,
                             std::size_t max_entries, std::uint64_t seed) {
  auto params = module.named_parameters();
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back({"input" + std::to_string(i), inputs[i]});
  Var probe = forward(inputs);
  const Tensor R = random_tensor(probe.shape(), rng, -1.0, 1.0);
  GradcheckProblem p;
  for (auto& np : params) p.params.emplace_back(np.name, &np.var.mutable_value());
  p.value = [&] {
    NoGradGuard ng;
    return dot(forward(inputs).value(), R);
  };
  p.analytic = [&] {
    clear_grads(params);
    backward(forward(inputs), R);
    return grads_of(params);
  };
  return gradcheck_problem(p, {.max_entries_per_param = max_entries, .seed = seed});
}

GradcheckResult check_decoder(std::uint64_t seed, std::vector<int> dilations) {
  std::mt19937_64 rng(seed);
  const std::array<int, 4> widths{4, 8, 8, 8};
  ScaleAwareModule sam(widths, {0, 1, 2, 3}, std::move(dilations), 4, rng);
  std::vector<Var> feats;
  for (int s = 0; s < 4; ++s) {
    const int side = 64 / kStageStrides[s];
    feats.push_back(Var::parameter(random_tensor({2, widths[s], side, side}, rng, -1.0, 1.0)));
  }
  auto fwd = [&sam](const std::vector<Var>& in) {
    BackboneFeatures f{{in[0], in[1], in[2], in[3]}};
    return sam.forward(f, 16, 16);
  };
  return check_module(sam, feats, fwd, rng, 24, seed);
}

GradcheckResult check_counting_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CountingHead head(4, 2, 1.0, rng);
  std::vector<Var> in{Var::parameter(random_tensor({2, 4, 8, 8}, rng, -1.0, 1.0))};
  auto fwd = [&head](const std::vector<Var>& x) { return head.forward(x[0]); };
  return check_module(head, in, fwd, rng, 0, seed);
}

GradcheckResult check_full(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelConfig mc;
  mc.num_classes = 2;
  mc.reference_widths = {4, 8, 8, 8};
  mc.decoder_channels = 8;
  CountingModel model(mc, seed);
  const Tensor x = random_tensor({1, 3, 64, 64}, rng, 0.0, 1.0);
  const AnnotationSet ann = random_annotations(rng, 2, 64, 6);
  const DensityMap gt = build_ground_truth(ann, 2, GtConfig{4.0, 4});
  const RegionMask mask = build_region_masks(gt);
  const SegTarget target = build_segmentation_target(gt);
  const LossConfig cfg{true, 1.0};

  auto params = model.named_parameters();
  auto loss_of = [&](const ModelOutput& out, LossGradients* g) {
    const DensityMap pred = slice_map(out.density.value(), 0, 4);
    const Tensor logits = slice_tensor(out.mask_logits->value(), 0);
    return total_loss(pred, gt, mask, &logits, target, cfg, g).total;
  };
  GradcheckProblem p;
  for (auto& np : params) p.params.emplace_back(np.name, &np.var.mutable_value());
  p.value = [&] {
    NoGradGuard ng;
    return loss_of(model.forward(Var::constant(x), Phase::Train), nullptr);
  };
  p.analytic = [&] {
    clear_grads(params);
    ModelOutput out = model.forward(Var::constant(x), Phase::Train);
    LossGradients g;
    loss_of(out, &g);
    std::vector<std::pair<Var, Tensor>> seeds{{out.density, g.density.reshaped(out.density.shape())},
                                              {*out.mask_logits, g.logits.reshaped(out.mask_logits->shape())}};
    backward(seeds);
    return grads_of(params);
  };
  return gradcheck_problem(p, {.step = 1e-3, .max_entries_per_param = 12, .seed = seed, .five_point = true});
}

}  // namespace

GradcheckResult gradcheck(const std::string& component, std::uint64_t seed) {
  if (component == "losses") return check_losses(seed);
  if (component == "counting_head") return check_counting_head(seed);
  if (component == "mam") return check_decoder(seed, {1, 2, 3});
  if (component == "cfm") return check_decoder(seed, {1, 2, 3, 4});
  if (component == "full") return check_full(seed);
  fail_validation("unknown gradcheck component '" + component + "' (expected losses, counting_head, mam, cfm, full)");
}

double gradcheck_threshold(const std::string& component) {
  if (component == "losses") return 1e-4;
  if (std::find(gradcheck_components().begin(), gradcheck_components().end(), component) == gradcheck_components().end())
    fail_validation("unknown gradcheck component '" + component + "'");
  return 1e-3;
}

// ---------------------------------------------------------------------------
// Heatmaps

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) out += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '-';
  return out;
}

cv::Mat heatmap(const DensityMap& d, int c, int out_h, int out_w) {
  double peak = 0;
  for (int i = 0; i < d.height(); ++i)
    for (int j = 0; j < d.width(); ++j) peak = std::max(peak, d.at(c, i, j));
  cv::Mat gray(d.height(), d.width(), CV_8UC1, cv::Scalar(0));
  cv::Mat colour;
  if (peak > 0) {
    for (int i = 0; i < d.height(); ++i)
      for (int j = 0; j < d.width(); ++j)
        gray.at<uchar>(i, j) = cv::saturate_cast<uchar>(std::lround(255.0 * std::max(0.0, d.at(c, i, j)) / peak));
    cv::applyColorMap(gray, colour, cv::COLORMAP_INFERNO);
  } else {
    colour = cv::Mat(d.height(), d.width(), CV_8UC3, cv::Scalar(0, 0, 0));
  }
  cv::Mat resized;
  cv::resize(colour, resized, cv::Size(out_w, out_h), 0, 0, cv::INTER_NEAREST);
  return resized;
}

}  // namespace

std::vector<fs::path> render_heatmaps(const DensityMap& density, const Image& input,
                                      std::span<const std::string> class_names, const std::string& item_id,
                                      const fs::path& out_dir) {
  if (static_cast<int>(class_names.size()) != density.classes())
    fail_validation("class name count does not match the density channels");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail_runtime("cannot create " + out_dir.string() + ": " + ec.message());
  const int H = input.height > 0 ? input.height : density.height() * density.resolution_scale;
  const int W = input.width > 0 ? input.width : density.width() * density.resolution_scale;

  cv::Mat in(H, W, CV_8UC3, cv::Scalar(0, 0, 0));
  for (int y = 0; y < std::min(H, input.height); ++y)
    for (int x = 0; x < std::min(W, input.width); ++x)
      for (int c = 0; c < 3; ++c)
        in.at<cv::Vec3b>(y, x)[2 - c] = cv::saturate_cast<uchar>(std::lround(255.0f * input.at(c, y, x)));

  std::vector<fs::path> written;
  std::vector<cv::Mat> panels{in};
  const std::string stem = sanitize(item_id);
  for (int c = 0; c < density.classes(); ++c) {
    cv::Mat h = heatmap(density, c, H, W);
    char count[32];
    std::snprintf(count, sizeof count, "%.2f", density.channel_sum(c));
    const fs::path p = out_dir / (stem + "_c" + std::to_string(c) + "_" + sanitize(class_names[c]) + "_" + count + ".png");
    if (!cv::imwrite(p.string(), h)) fail_runtime("cannot write " + p.string());
    written.push_back(p);
    panels.push_back(h);
  }
  cv::Mat composite;
  cv::hconcat(panels, composite);
  const fs::path cp = out_dir / (stem + "_composite.png");
  if (!cv::imwrite(cp.string(), composite)) fail_runtime("cannot write " + cp.string());
  written.push_back(cp);
  return written;
}

std::vector<fs::path> render_heatmaps(CountingModel& model, const DatasetManifest& manifest, std::size_t item,
                                      const fs::path& out_dir) {
  if (item >= manifest.items.size()) fail_validation("item index " + std::to_string(item) + " out of range");
  if (manifest.num_classes() != model.config().num_classes)
    fail_validation("manifest category count does not match the model");
  const Image img = item_image(manifest, manifest.items[item]);
  const ModelOutput o = model.forward(Var::constant(image_tensor(img)), Phase::Infer);
  return render_heatmaps(slice_map(o.density.value(), 0, model.config().output_stride), img, manifest.categories,
                         manifest.items[item].ann.image_id, out_dir);
}

}  // namespace mcc
