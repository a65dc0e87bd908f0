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


#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run mcount(const std::string& args) {
  const fs::path err_file = fs::temp_directory_path() / "mcc_cli_stderr.txt";
  const std::string cmd = std::string(MCOUNT_BIN) + " " + args + " 2>" + err_file.string();
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_file);
  return r;
}

struct Workspace {
  fs::path dir = fs::temp_directory_path() / "mcc_cli_ws";
  Workspace() {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

const char* kToyTrain = R"({"model": {"num_classes": 2, "reference_widths": [4, 8, 8, 8], "decoder_channels": 8},
                            "epochs": 2, "batch_size": 2})";

// Shared fixture: a synthetic manifest and a trained toy checkpoint.
struct Trained {
  Workspace ws;
  Trained() {
    REQUIRE(mcount("synth --out " + ws / "data" +
                   " --override classes=2 --override images=10 --override width=64 --override height=64")
                .code == 0);
    std::ofstream(ws / "train.json") << kToyTrain;
    const Run t = mcount("train --config " + ws / "train.json" + " --manifest " + ws / "data/manifest.json" +
                         " --out " + ws / "run");
    INFO(t.err);
    REQUIRE(t.code == 0);
  }
};

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(mcount("").code == 1);
  CHECK(mcount("frobnicate").code == 1);
  const Run r = mcount("gradcheck --component losses --bogus-flag");
  CHECK(r.code == 1);
  CHECK(r.err.find("--bogus-flag") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(mcount("eval --manifest m.json").code == 1);
  CHECK(mcount("gradcheck --component everything").code == 1);
}

TEST_CASE("help exits 0 and lists the commands") {
  const Run r = mcount("--help");
  CHECK(r.code == 0);
  for (const char* cmd : {"synth", "ingest", "gen-gt", "train", "eval", "gradcheck", "render"})
    CHECK(r.out.find(cmd) != std::string::npos);
}

TEST_CASE("every flag is documented in help and in the README") {
  const std::string readme = slurp(README_PATH);
  REQUIRE(!readme.empty());
  const std::vector<std::pair<std::string, std::vector<std::string>>> flags{
      {"synth", {"--config", "--override", "--seed", "--out"}},
      {"ingest", {"--config", "--override", "--seed", "--out"}},
      {"gen-gt", {"--config", "--override", "--manifest", "--out"}},
      {"train", {"--config", "--override", "--seed", "--manifest", "--out", "--checkpoint"}},
      {"eval", {"--checkpoint", "--manifest", "--ranges", "--split", "--out"}},
      {"gradcheck", {"--component", "--seed"}},
      {"render", {"--checkpoint", "--manifest", "--item", "--out"}}};
  for (const auto& [cmd, list] : flags) {
    const Run help = mcount(cmd + " --help");
    CHECK(help.code == 0);
    CHECK(readme.find("mcount " + cmd) != std::string::npos);
    for (const auto& f : list) {
      INFO(cmd << " " << f);
      CHECK(help.out.find(f) != std::string::npos);
      CHECK(readme.find(f) != std::string::npos);
    }
  }
  CHECK(readme.find("MC_CACHE_DIR") != std::string::npos);
}

TEST_CASE("gradcheck exit status follows the threshold") {
  const Run r = mcount("gradcheck --component losses --seed 2");
  CHECK(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j["pass"] == true);
  CHECK(j["seed"] == 2);
  CHECK(j["max_rel_err"].get<double>() < 1e-4);
}

TEST_CASE("config and override validation") {
  Workspace ws;
  CHECK(mcount("synth --out " + ws / "d" + " --override imagez=3").code == 1);
  CHECK(mcount("synth --out " + ws / "d" + " --override images").code == 1);
  std::ofstream(ws / "bad.json") << "{ not json";
  CHECK(mcount("synth --out " + ws / "d" + " --config " + ws / "bad.json").code == 1);
  std::ofstream(ws / "unknown.json") << R"({"images": 4, "colour": "red"})";
  CHECK(mcount("synth --out " + ws / "d" + " --config " + ws / "unknown.json").code == 1);
  CHECK(mcount("synth --out " + ws / "d" + " --config " + ws / "missing.json").code == 2);
  CHECK(mcount("gen-gt --manifest " + ws / "missing.json" + " --out " + ws / "gt").code == 2);
}

TEST_CASE("synth seed override is deterministic") {
  Workspace ws;
  const std::string common = " --override images=6 --override width=64 --override height=64";
  REQUIRE(mcount("synth --seed 9 --out " + ws / "a" + common).code == 0);
  REQUIRE(mcount("synth --seed 9 --out " + ws / "b" + common).code == 0);
  REQUIRE(mcount("synth --seed 10 --out " + ws / "c" + common).code == 0);
  const json a = json::parse(slurp(ws / "a/manifest.json")), b = json::parse(slurp(ws / "b/manifest.json")),
             c = json::parse(slurp(ws / "c/manifest.json"));
  CHECK(a == b);
  CHECK(a["images"] != c["images"]);
}

TEST_CASE("ingest and gen-gt") {
  Workspace ws;
  REQUIRE(mcount("synth --out " + ws / "raw" + " --override images=4 --override width=128 --override height=64").code ==
          0);
  const Run ing = mcount("ingest --out " + ws / "patched/manifest.json" + " --override input=\\\"" +
                         ws / "raw/manifest.json" + "\\\" --override patch=64");
  INFO(ing.err);
  REQUIRE(ing.code == 0);
  CHECK(json::parse(ing.out)["items"] == 8);
  const Run gt = mcount("gen-gt --manifest " + ws / "patched/manifest.json" + " --out " + ws / "gt");
  INFO(gt.err);
  REQUIRE(gt.code == 0);
  const json summary = json::parse(gt.out);
  CHECK(summary["items"].size() == 8);
  CHECK(fs::exists(ws / "gt/" + summary["items"][0]["file"].get<std::string>()));
  CHECK(mcount("ingest --out " + ws / "x.json" + " --override format=coco --override input=x").code == 1);
}

TEST_CASE("train, eval and render through the binary") {
  Trained t;
  const std::string ck = t.ws / "run/model.mckp", manifest = t.ws / "data/manifest.json";
  CHECK(fs::exists(ck));
  CHECK(fs::exists(t.ws / "run/train_log.jsonl"));

  const Run ev = mcount("eval --checkpoint " + ck + " --manifest " + manifest + " --ranges 0:10,11:50");
  INFO(ev.err);
  REQUIRE(ev.code == 0);
  const json rep = json::parse(ev.out);
  CHECK(rep["overall"]["sample_count"] == 10);
  CHECK(rep["ranges"].size() == 2);

  const Run test_only = mcount("eval --checkpoint " + ck + " --manifest " + manifest + " --split test --out " +
                               t.ws / "report.json");
  REQUIRE(test_only.code == 0);
  CHECK(json::parse(test_only.out)["overall"]["sample_count"] == 2);
  CHECK(json::parse(slurp(t.ws / "report.json")) == json::parse(test_only.out));

  CHECK(mcount("eval --checkpoint " + t.ws / "nope.mckp" + " --manifest " + manifest).code == 2);
  CHECK(mcount("eval --checkpoint " + ck + " --manifest " + manifest + " --ranges 9:3").code == 1);
  CHECK(mcount("eval --checkpoint " + ck + " --manifest " + manifest + " --split holdout").code == 1);
  std::ofstream(t.ws / "garbage.mckp") << "not a checkpoint";
  CHECK(mcount("eval --checkpoint " + t.ws / "garbage.mckp" + " --manifest " + manifest).code == 1);

  const Run render = mcount("render --checkpoint " + ck + " --manifest " + manifest + " --item 1 --out " +
                            t.ws / "heat");
  REQUIRE(render.code == 0);
  const json files = json::parse(render.out);
  CHECK(files.size() == 3);
  for (const auto& f : files) CHECK(fs::exists(f.get<std::string>()));
  CHECK(mcount("render --checkpoint " + ck + " --manifest " + manifest + " --item 99 --out " + t.ws / "heat").code ==
        1);
}

TEST_CASE("train fault injection") {
  Workspace ws;
  REQUIRE(mcount("synth --out " + ws / "data" +
                 " --override classes=2 --override images=6 --override width=64 --override height=64")
              .code == 0);
  std::ofstream(ws / "train.json") << kToyTrain;
  const std::string base = "train --config " + ws / "train.json" + " --manifest " + ws / "data/manifest.json";
  CHECK(mcount(base + " --out " + ws / "r1" + " --override optimizer.lr=-1").code == 1);
  CHECK(mcount(base + " --out " + ws / "r1" + " --override optimizer.nesterov=true").code == 1);
  CHECK(mcount(base + " --out " + ws / "r1" + " --override model.num_classes=5").code == 1);
  std::ofstream(ws / "blocker") << "x";
  CHECK(mcount(base + " --out " + ws / "r2" + " --checkpoint " + ws / "blocker/model.mckp").code == 2);
}
