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

// mcount command-line tool. Exit codes: 0 success, 1 validation/usage error,
// 2 runtime failure (and gradcheck above threshold).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mcc/mcc.h"

namespace {

using nlohmann::json;

struct Failure {
  int code;
  std::string message;
};

void check(mcc_status s) {
  if (s != MCC_OK) throw Failure{static_cast<int>(s), mcc_last_error()};
}

[[noreturn]] void usage_error(const std::string& msg) { throw Failure{1, msg}; }

std::string take(char* s) {
  std::string out = s ? s : "";
  mcc_string_free(s);
  return out;
}

struct ManifestPtr {
  mcc_manifest* p = nullptr;
  ~ManifestPtr() { mcc_manifest_free(p); }
};

struct ModelPtr {
  mcc_model* p = nullptr;
  ~ModelPtr() { mcc_model_free(p); }
};

json default_config(const char* kind) {
  char* text = nullptr;
  check(mcc_default_config(kind, &text));
  return json::parse(take(text));
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure{2, "cannot open " + path};
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    usage_error(path + ": " + e.what());
  }
}

// Dotted-path override; the key must already exist in the merged config.
void apply_override(json& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) usage_error("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
  json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) usage_error("override names unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  *node = value;
}

json load_config(const char* kind, const std::string& path, const std::vector<std::string>& overrides,
                 const std::optional<std::uint64_t>& seed) {
  json cfg = default_config(kind);
  if (!path.empty()) {
    const json file = read_json_file(path);
    if (!file.is_object()) usage_error(path + ": config must be a JSON object");
    cfg.merge_patch(file);
  }
  for (const auto& kv : overrides) apply_override(cfg, kv);
  if (seed) {
    if (!cfg.contains("seed")) usage_error("--seed does not apply to this command");
    cfg["seed"] = *seed;
  }
  return cfg;
}

ManifestPtr open_manifest(const std::string& path) {
  ManifestPtr m;
  check(mcc_manifest_read(path.c_str(), &m.p));
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mcount: multi-class density-map object counting"};
  app.require_subcommand(1);

  std::string config, manifest, checkpoint, out, ranges, component, split = "all";
  std::vector<std::string> overrides;
  std::uint64_t seed_value = 0;
  std::size_t item = 0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON configuration file");
    cmd->add_option("--override", overrides, "Set an existing config key, e.g. optimizer.lr=0.003 (repeatable)");
  };
  auto add_seed = [&](CLI::App* cmd) { return cmd->add_option("--seed", seed_value, "Seed for all randomness"); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset and manifest");
  add_config(synth);
  auto* synth_seed = add_seed(synth);
  synth->add_option("--out", out, "Output directory (manifest.json + images/)")->required();

  auto* ingest = app.add_subcommand("ingest", "Convert, resize, merge, split and patch a dataset");
  add_config(ingest);
  auto* ingest_seed = add_seed(ingest);
  ingest->add_option("--out", out, "Output manifest path")->required();

  auto* gen_gt = app.add_subcommand("gen-gt", "Render ground-truth density maps as DMAP files");
  add_config(gen_gt);
  gen_gt->add_option("--manifest", manifest, "Dataset manifest")->required();
  gen_gt->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train on the train split, selecting by validation macro-MAE");
  add_config(train);
  auto* train_seed = add_seed(train);
  train->add_option("--manifest", manifest, "Dataset manifest with train/val splits")->required();
  train->add_option("--out", out, "Output directory (model.mckp, train_log.jsonl)")->required();
  train->add_option("--checkpoint", checkpoint, "Checkpoint path (default <out>/model.mckp)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints the range report as JSON");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--manifest", manifest, "Dataset manifest")->required();
  eval->add_option("--ranges", ranges, "Count ranges, e.g. 0:10,11:50");
  eval->add_option("--split", split, "Items to evaluate: all, train, val or test")->check(
      CLI::IsMember({"all", "train", "val", "test"}));
  eval->add_option("--out", out, "Also write the report JSON to this file");

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck->add_option("--component", component, "losses, counting_head, mam, cfm or full")->required();
  auto* gradcheck_seed = add_seed(gradcheck);

  auto* render = app.add_subcommand("render", "Write per-class density heatmaps for one item");
  render->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  render->add_option("--manifest", manifest, "Dataset manifest")->required();
  render->add_option("--item", item, "Item index in the manifest");
  render->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  auto seed_of = [&](CLI::Option* opt) {
    return opt->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt;
  };

  try {
    if (synth->parsed()) {
      const json cfg = load_config("synth", config, overrides, seed_of(synth_seed));
      ManifestPtr m;
      check(mcc_synth(cfg.dump().c_str(), &m.p));
      const std::string path = (std::filesystem::path(out) / "manifest.json").string();
      check(mcc_manifest_write(m.p, path.c_str()));
      std::size_t n = 0;
      check(mcc_manifest_size(m.p, &n));
      std::cout << json{{"manifest", path}, {"items", n}}.dump() << "\n";
    } else if (ingest->parsed()) {
      const json cfg = load_config("ingest", config, overrides, seed_of(ingest_seed));
      ManifestPtr m;
      check(mcc_ingest(cfg.dump().c_str(), &m.p));
      check(mcc_manifest_write(m.p, out.c_str()));
      std::size_t n = 0;
      check(mcc_manifest_size(m.p, &n));
      std::cout << json{{"manifest", out}, {"items", n}}.dump() << "\n";
    } else if (gen_gt->parsed()) {
      const json cfg = load_config("gt", config, overrides, std::nullopt);
      ManifestPtr m = open_manifest(manifest);
      char* summary = nullptr;
      check(mcc_gen_gt(m.p, cfg.dump().c_str(), out.c_str(), &summary));
      std::cout << take(summary) << "\n";
    } else if (train->parsed()) {
      const json cfg = load_config("train", config, overrides, seed_of(train_seed));
      ManifestPtr m = open_manifest(manifest);
      std::filesystem::create_directories(out);
      const std::string ck = checkpoint.empty() ? (std::filesystem::path(out) / "model.mckp").string() : checkpoint;
      const std::string log = (std::filesystem::path(out) / "train_log.jsonl").string();
      char* result = nullptr;
      check(mcc_train(cfg.dump().c_str(), m.p, ck.c_str(), log.c_str(), &result));
      json r = json::parse(take(result));
      r["checkpoint"] = ck;
      r["log"] = log;
      std::cout << r.dump() << "\n";
    } else if (eval->parsed()) {
      ManifestPtr all = open_manifest(manifest);
      ManifestPtr subset;
      check(mcc_manifest_subset(all.p, split.c_str(), &subset.p));
      ModelPtr model;
      check(mcc_model_load(checkpoint.c_str(), &model.p));
      char* report = nullptr;
      check(mcc_evaluate(model.p, subset.p, ranges.c_str(), &report));
      const std::string text = take(report);
      if (!out.empty()) {
        std::ofstream f(out);
        f << text << "\n";
        if (!f) throw Failure{2, "cannot write " + out};
      }
      std::cout << text << "\n";
    } else if (gradcheck->parsed()) {
      double err = 0, threshold = 0;
      char* worst = nullptr;
      const std::uint64_t seed = gradcheck_seed->count() ? seed_value : 0;
      check(mcc_gradcheck(component.c_str(), seed, &err, &threshold, &worst));
      const bool pass = err < threshold;
      std::cout << json{{"component", component}, {"seed", seed},         {"max_rel_err", err},
                        {"threshold", threshold}, {"worst", take(worst)}, {"pass", pass}}
                       .dump()
                << "\n";
      if (!pass) {
        std::cerr << "gradcheck " << component << ": max relative error " << err << " >= " << threshold << "\n";
        return 2;
      }
    } else if (render->parsed()) {
      ManifestPtr m = open_manifest(manifest);
      ModelPtr model;
      check(mcc_model_load(checkpoint.c_str(), &model.p));
      char* files = nullptr;
      check(mcc_render(model.p, m.p, item, out.c_str(), &files));
      std::cout << take(files) << "\n";
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
