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

#include "mcc/mcc.h"

#include <climits>
#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "mcc/autograd.hpp"
#include "mcc/data_ingest.hpp"
#include "mcc/density_gt.hpp"
#include "mcc/error.hpp"
#include "mcc/metrics.hpp"
#include "mcc/model.hpp"
#include "mcc/train_eval.hpp"

struct mcc_model {
  std::unique_ptr<mcc::CountingModel> model;
};

struct mcc_manifest {
  mcc::DatasetManifest manifest;
};

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

template <class F>
mcc_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return MCC_OK;
  } catch (const mcc::ValidationError& e) {
    g_last_error = e.what();
    return MCC_ERR_VALIDATION;
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return MCC_ERR_VALIDATION;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MCC_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MCC_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return MCC_ERR_RUNTIME;
  }
}

void require(const void* p, const char* name) {
  if (!p) mcc::fail_validation(std::string(name) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse(const char* text, const char* what) {
  if (!text || !*text) return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    mcc::fail_validation(std::string(what) + ": " + e.what());
  }
}

json synth_defaults() {
  const mcc::SynthSpec s;
  return {{"classes", s.classes},     {"images", s.images},       {"width", s.width},
          {"height", s.height},       {"count_min", s.count_min}, {"count_max", s.count_max},
          {"sparsity", s.sparsity},   {"blob_radius", s.blob_radius}, {"seed", s.seed},
          {"split", {0.7, 0.1, 0.2}}};
}

json ingest_defaults() {
  return {{"format", "annotations"}, {"input", ""},        {"images", ""},          {"categories", json::array()},
          {"merge_visdrone", false},  {"top_k", 0},         {"max_width", 0},        {"patch", 0},
          {"split", {0.7, 0.1, 0.2}}, {"seed", 0}};
}

json gt_defaults() { return {{"sigma", 4.0}, {"stride", 4}}; }

// Config keys must exist in the defaults.
void check_keys(const json& given, const json& defaults, const std::string& prefix) {
  if (!given.is_object()) mcc::fail_validation((prefix.empty() ? std::string("config") : prefix) + " must be an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) mcc::fail_validation("unknown config key '" + key + "'");
    if (it->is_object() && defaults.at(it.key()).is_object()) check_keys(*it, defaults.at(it.key()), key);
  }
}

std::array<double, 3> ratios_of(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) mcc::fail_validation("split must list three ratios (train, val, test)");
  return {v[0], v[1], v[2]};
}

mcc::Split split_of(const char* name) {
  require(name, "split");
  return mcc::parse_split(name);
}

}  // namespace

extern "C" {

const char* mcc_last_error(void) { return g_last_error.c_str(); }

const char* mcc_version(void) { return "0.1.0"; }

void mcc_string_free(char* s) { std::free(s); }

mcc_status mcc_default_config(const char* kind, char** json_out) {
  return guarded([&] {
    require(kind, "kind");
    require(json_out, "json_out");
    const std::string k = kind;
    json j;
    if (k == "train")
      j = mcc::to_json(mcc::TrainConfig{});
    else if (k == "synth")
      j = synth_defaults();
    else if (k == "ingest")
      j = ingest_defaults();
    else if (k == "gt")
      j = gt_defaults();
    else
      mcc::fail_validation("unknown config kind '" + k + "'");
    *json_out = dup(j.dump(2));
  });
}

// ---------------------------------------------------------------------------
// Manifests

mcc_status mcc_manifest_read(const char* path, mcc_manifest** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new mcc_manifest{mcc::read_manifest(path)};
  });
}

mcc_status mcc_manifest_write(mcc_manifest* m, const char* path) {
  return guarded([&] {
    require(m, "manifest");
    require(path, "path");
    mcc::write_manifest(m->manifest, path);
  });
}

void mcc_manifest_free(mcc_manifest* m) { delete m; }

mcc_status mcc_manifest_size(const mcc_manifest* m, size_t* out) {
  return guarded([&] {
    require(m, "manifest");
    require(out, "out");
    *out = m->manifest.items.size();
  });
}

mcc_status mcc_manifest_num_classes(const mcc_manifest* m, int* out) {
  return guarded([&] {
    require(m, "manifest");
    require(out, "out");
    *out = m->manifest.num_classes();
  });
}

mcc_status mcc_manifest_subset(const mcc_manifest* m, const char* split, mcc_manifest** out) {
  return guarded([&] {
    require(m, "manifest");
    require(out, "out");
    auto sub = std::make_unique<mcc_manifest>(mcc_manifest{m->manifest});
    if (!split || std::string(split) != "all") sub->manifest.items = mcc::items_in_split(m->manifest, split_of(split));
    *out = sub.release();
  });
}

mcc_status mcc_manifest_split(mcc_manifest* m, double train, double val, double test, uint64_t seed) {
  return guarded([&] {
    require(m, "manifest");
    m->manifest = mcc::split_dataset(std::move(m->manifest), {train, val, test}, seed);
  });
}

mcc_status mcc_manifest_json(const mcc_manifest* m, char** json_out) {
  return guarded([&] {
    require(m, "manifest");
    require(json_out, "json_out");
    *json_out = dup(mcc::to_json(m->manifest).dump(1));
  });
}

mcc_status mcc_synth(const char* config_json, mcc_manifest** out) {
  return guarded([&] {
    require(out, "out");
    const json given = parse(config_json, "synth config");
    check_keys(given, synth_defaults(), "");
    json cfg = synth_defaults();
    cfg.merge_patch(given);
    const mcc::SynthSpec spec = mcc::synth_spec_from_json(cfg);
    mcc::DatasetManifest m = mcc::synth_dataset(spec);
    m = mcc::split_dataset(std::move(m), ratios_of(cfg.at("split")), spec.seed);
    *out = new mcc_manifest{std::move(m)};
  });
}

mcc_status mcc_ingest(const char* config_json, mcc_manifest** out) {
  return guarded([&] {
    require(out, "out");
    const json given = parse(config_json, "ingest config");
    check_keys(given, ingest_defaults(), "");
    json cfg = ingest_defaults();
    cfg.merge_patch(given);
    const std::string format = cfg.at("format").get<std::string>();
    const std::string input = cfg.at("input").get<std::string>();
    if (input.empty()) mcc::fail_validation("ingest config needs 'input'");
    mcc::DatasetManifest m;
    if (format == "annotations") {
      m = mcc::read_annotation_file(input);
    } else if (format == "visdrone") {
      m = mcc::read_visdrone(cfg.at("images").get<std::string>(), input);
    } else if (format == "isaid") {
      m = mcc::read_isaid(input, cfg.at("images").get<std::string>(),
                          cfg.at("categories").get<std::vector<std::string>>());
    } else {
      mcc::fail_validation("unknown ingest format '" + format + "' (annotations, visdrone, isaid)");
    }
    if (cfg.at("merge_visdrone").get<bool>()) {
      const auto mapping = mcc::visdrone_merge_mapping();
      m = mcc::merge_classes(std::move(m), mapping, mcc::visdrone_categories(true));
    }
    if (const int k = cfg.at("top_k").get<int>(); k > 0) m = mcc::select_top_k_classes(std::move(m), k);
    m = mcc::split_dataset(std::move(m), ratios_of(cfg.at("split")), cfg.at("seed").get<std::uint64_t>());
    m.seed = cfg.at("seed").get<std::uint64_t>();
    const int max_width = cfg.at("max_width").get<int>();
    if (max_width < 0) mcc::fail_validation("max_width must be >= 0");
    for (auto& it : m.items) {
      it.image = mcc::item_image(m, it);
      it.file.clear();
      it = mcc::resize_to_max_width(std::move(it), max_width > 0 ? max_width : INT_MAX);
    }
    if (const int patch = cfg.at("patch").get<int>(); patch > 0) m = mcc::patch_dataset(m, patch);
    *out = new mcc_manifest{std::move(m)};
  });
}

mcc_status mcc_gen_gt(const mcc_manifest* m, const char* gt_config_json, const char* out_dir, char** summary_json) {
  return guarded([&] {
    require(m, "manifest");
    require(out_dir, "out_dir");
    const json given = parse(gt_config_json, "gt config");
    check_keys(given, gt_defaults(), "");
    json cfg = gt_defaults();
    cfg.merge_patch(given);
    const mcc::GtConfig gc{cfg.at("sigma").get<double>(), cfg.at("stride").get<int>()};
    if (!(gc.sigma > 0) || gc.stride < 1) mcc::fail_validation("gt config needs sigma > 0 and stride >= 1");
    json items = json::array();
    int clamped = 0;
    const std::filesystem::path dir(out_dir);
    for (const auto& it : m->manifest.items) {
      mcc::RenderStats stats;
      const mcc::DensityMap map = mcc::build_ground_truth(it.ann, m->manifest.num_classes(), gc, &stats);
      clamped += stats.clamped_centroids;
      const std::string file = it.ann.image_id + ".dmap";
      mcc::write_dmap(map, dir / file);
      json counts = json::array();
      for (int c = 0; c < map.classes(); ++c) counts.push_back(map.channel_sum(c));
      items.push_back({{"id", it.ann.image_id}, {"file", file}, {"counts", counts}});
    }
    if (summary_json)
      *summary_json = dup(json{{"sigma", gc.sigma}, {"stride", gc.stride}, {"clamped_centroids", clamped}, {"items", items}}
                              .dump(1));
  });
}

// ---------------------------------------------------------------------------
// Models

mcc_status mcc_model_create(const char* model_config_json, uint64_t seed, mcc_model** out) {
  return guarded([&] {
    require(out, "out");
    const mcc::ModelConfig cfg = mcc::model_config_from_json(parse(model_config_json, "model config"));
    *out = new mcc_model{std::make_unique<mcc::CountingModel>(cfg, seed)};
  });
}

mcc_status mcc_model_load(const char* path, mcc_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new mcc_model{mcc::load_checkpoint(path).model};
  });
}

mcc_status mcc_model_save(mcc_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    mcc::save_checkpoint(*model->model, path);
  });
}

void mcc_model_free(mcc_model* model) { delete model; }

mcc_status mcc_model_config(const mcc_model* model, char** json_out) {
  return guarded([&] {
    require(model, "model");
    require(json_out, "json_out");
    *json_out = dup(mcc::to_json(model->model->config()).dump(2));
  });
}

mcc_status mcc_model_parameter_count(const mcc_model* model, size_t* out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = model->model->parameter_count();
  });
}

namespace {

mcc::Tensor pixels_tensor(const float* pixels, int height, int width) {
  require(pixels, "pixels");
  if (height <= 0 || width <= 0) mcc::fail_validation("image dimensions must be positive");
  mcc::Tensor t({1, 3, height, width});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = pixels[i];
  return t;
}

}  // namespace

mcc_status mcc_model_predict(mcc_model* model, const float* pixels, int height, int width, double* counts,
                             size_t counts_len) {
  return guarded([&] {
    require(model, "model");
    require(counts, "counts");
    const int C = model->model->config().num_classes;
    if (counts_len < static_cast<size_t>(C))
      mcc::fail_validation("counts buffer holds " + std::to_string(counts_len) + " values, model has " +
                           std::to_string(C) + " classes");
    const auto out = model->model->forward(mcc::Var::constant(pixels_tensor(pixels, height, width)), mcc::Phase::Infer);
    const mcc::Tensor& d = out.density.value();
    const std::size_t per = d.numel() / C;
    for (int c = 0; c < C; ++c) {
      std::vector<double> v(d.data() + c * per, d.data() + (c + 1) * per);
      counts[c] = mcc::pairwise_sum(v);
    }
  });
}

mcc_status mcc_model_mask_channels(mcc_model* model, const float* pixels, int height, int width, int* out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    mcc::NoGradGuard no_grad;
    const auto o = model->model->forward(mcc::Var::constant(pixels_tensor(pixels, height, width)), mcc::Phase::Train);
    *out = o.mask_logits ? o.mask_logits->value().dim(1) : 0;
  });
}

mcc_status mcc_model_trace(const mcc_model* model, mcc_trace* out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    const auto& t = model->model->trace();
    *out = {t.backbone_calls, t.counting_branch_calls, t.masking_branch_calls};
  });
}

mcc_status mcc_model_reset_trace(mcc_model* model) {
  return guarded([&] {
    require(model, "model");
    model->model->reset_trace();
  });
}

// ---------------------------------------------------------------------------
// Training and evaluation

mcc_status mcc_train(const char* config_json, const mcc_manifest* m, const char* checkpoint_path, const char* log_path,
                     char** result_json) {
  return guarded([&] {
    require(m, "manifest");
    const json given = parse(config_json, "train config");
    check_keys(given, mcc::to_json(mcc::TrainConfig{}), "");
    const mcc::TrainConfig cfg = mcc::train_config_from_json(given);
    mcc::DatasetManifest tr = m->manifest, va = m->manifest;
    tr.items = mcc::items_in_split(m->manifest, mcc::Split::Train);
    va.items = mcc::items_in_split(m->manifest, mcc::Split::Val);
    if (tr.items.empty()) mcc::fail_validation("manifest has no train items");
    if (va.items.empty()) mcc::fail_validation("manifest has no val items");
    mcc::TrainOptions opt;
    if (checkpoint_path) opt.checkpoint = checkpoint_path;
    if (log_path) opt.log = log_path;
    const mcc::TrainResult r = mcc::train(cfg, tr, va, opt);
    if (result_json)
      *result_json = dup(json{{"best_epoch", r.best_epoch}, {"best_val_mae", r.best_val_mae}, {"epochs", cfg.epochs}}.dump());
  });
}

mcc_status mcc_evaluate(mcc_model* model, const mcc_manifest* m, const char* ranges, char** report_json) {
  return guarded([&] {
    require(model, "model");
    require(m, "manifest");
    require(report_json, "report_json");
    const auto r = (ranges && *ranges) ? mcc::parse_ranges(ranges) : std::vector<mcc::CountRange>{};
    const mcc::RangeReport rep = mcc::evaluate(*model->model, m->manifest, r);
    *report_json = dup(mcc::to_json(rep).dump(2));
  });
}

mcc_status mcc_format_report(const char* report_json, char** text_out) {
  return guarded([&] {
    require(report_json, "report_json");
    require(text_out, "text_out");
    *text_out = dup(mcc::format_report(mcc::range_report_from_json(parse(report_json, "report"))));
  });
}

mcc_status mcc_gradcheck(const char* component, uint64_t seed, double* max_rel_err, double* threshold, char** worst) {
  return guarded([&] {
    require(component, "component");
    const double thr = mcc::gradcheck_threshold(component);
    const mcc::GradcheckResult r = mcc::gradcheck(component, seed);
    if (max_rel_err) *max_rel_err = r.max_rel_err;
    if (threshold) *threshold = thr;
    if (worst) *worst = dup(r.worst);
  });
}

mcc_status mcc_render(mcc_model* model, const mcc_manifest* m, size_t item, const char* out_dir, char** files_json) {
  return guarded([&] {
    require(model, "model");
    require(m, "manifest");
    require(out_dir, "out_dir");
    const auto files = mcc::render_heatmaps(*model->model, m->manifest, item, out_dir);
    if (files_json) {
      json j = json::array();
      for (const auto& f : files) j.push_back(f.string());
      *files_json = dup(j.dump(1));
    }
  });
}

}  // extern "C"
