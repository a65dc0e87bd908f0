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


#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "mcc/data_ingest.hpp"
#include "mcc/error.hpp"

using namespace mcc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("mcc_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

DatasetItem item_of(const std::string& id, int w, int h, std::vector<Box> boxes, bool with_pixels = false) {
  DatasetItem it;
  it.ann = {id, w, h, std::move(boxes)};
  it.source_id = id;
  if (with_pixels) {
    Image img(w, h);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>((i * 7) % 11) / 10.0f;
    it.image = std::move(img);
  }
  return it;
}

std::size_t total_boxes(const DatasetManifest& m) {
  std::size_t n = 0;
  for (const auto& it : m.items) n += it.ann.boxes.size();
  return n;
}

DatasetManifest plain_manifest(int n, int classes = 2) {
  DatasetManifest m;
  m.name = "plain";
  for (int c = 0; c < classes; ++c) m.categories.push_back("c" + std::to_string(c));
  for (int i = 0; i < n; ++i) m.items.push_back(item_of("img" + std::to_string(i), 64, 64, {{i % classes, 4, 4, 12, 12}}));
  return m;
}

}  // namespace

TEST_SUITE("data_ingest") {

TEST_CASE("resize to a maximum width") {
  auto big = resize_to_max_width(item_of("big", 2048, 1536, {{0, 100, 100, 200, 200}}, true), 1024);
  CHECK(big.ann.width == 1024);
  CHECK(big.ann.height == 768);
  CHECK(big.image->width == 1024);
  CHECK(big.ann.boxes[0] == Box{0, 50, 50, 100, 100});

  auto small = resize_to_max_width(item_of("small", 800, 600, {{0, 10, 20, 30, 40}}, true), 1024);
  CHECK(small.ann.width == 800);
  CHECK(small.ann.height == 608);
  CHECK(small.ann.boxes[0] == Box{0, 10, 20, 30, 40});
  CHECK(small.image->at(0, 605, 10) == 0.0f);
  CHECK(small.image->at(1, 5, 10) == item_of("small", 800, 600, {}, true).image->at(1, 5, 10));

  CHECK_THROWS_AS(resize_to_max_width(item_of("x", 64, 64, {}), 1024), ValidationError);
  CHECK_THROWS_AS(resize_to_max_width(item_of("x", 64, 64, {}, true), 0), ValidationError);
}

TEST_CASE("patch grid arithmetic") {
  const auto four = patch_image(item_of("a", 1600, 1600, {}), 800);
  CHECK(four.size() == 4);
  CHECK(four[3].ann.image_id == "a_p1_1");

  const auto anchored = patch_image(item_of("b", 1000, 1000, {{0, 850, 100, 870, 120}, {0, 300, 300, 310, 310}}, true), 800);
  REQUIRE(anchored.size() == 4);
  // Box centred at x=860 belongs to column 1, whose tile starts at 200.
  CHECK(anchored[1].ann.boxes == std::vector<Box>{{0, 650, 100, 670, 120}});
  CHECK(anchored[0].ann.boxes == std::vector<Box>{{0, 300, 300, 310, 310}});
  CHECK(anchored[1].image->at(0, 0, 0) == item_of("b", 1000, 1000, {}, true).image->at(0, 0, 200));
  for (const auto& t : anchored) {
    CHECK(t.ann.width == 800);
    CHECK(t.source_id == "b");
  }
  CHECK(anchored[2].ann.boxes.empty());
  CHECK(anchored[3].ann.boxes.empty());
}

TEST_CASE("small images give one padded tile") {
  const auto tiles = patch_image(item_of("s", 300, 200, {{1, 10, 10, 20, 20}}, true), 800);
  REQUIRE(tiles.size() == 1);
  CHECK(tiles[0].ann.width == 800);
  CHECK(tiles[0].ann.height == 800);
  CHECK(tiles[0].ann.boxes.size() == 1);
  CHECK(tiles[0].image->at(2, 500, 500) == 0.0f);
  CHECK_THROWS_AS(patch_image(item_of("s", 300, 200, {}), 0), ValidationError);
}

TEST_CASE("boxes crossing tile borders go to exactly one tile") {
  const auto tiles = patch_image(item_of("c", 1600, 800, {{0, 780, 10, 820, 30}, {0, 790, 40, 810, 60}}), 800);
  REQUIRE(tiles.size() == 2);
  CHECK(tiles[0].ann.boxes.empty());
  REQUIRE(tiles[1].ann.boxes.size() == 2);
  CHECK(tiles[1].ann.boxes[0] == Box{0, 0, 10, 20, 30});
}

TEST_CASE("class merging") {
  auto m = plain_manifest(0, 10);
  m.categories = visdrone_categories(false);
  m.items.push_back(item_of("v", 100, 100, {{0, 1, 1, 5, 5}, {1, 1, 1, 5, 5}, {6, 1, 1, 5, 5}, {7, 1, 1, 5, 5}, {9, 1, 1, 5, 5}}));
  const auto merged = merge_classes(m, visdrone_merge_mapping(), visdrone_categories(true));
  CHECK(merged.num_classes() == 8);
  std::vector<int> ids;
  for (const auto& b : merged.items[0].ann.boxes) ids.push_back(b.class_id);
  CHECK(ids == std::vector<int>{0, 0, 5, 5, 7});
  CHECK(merged.categories[0] == "people");

  const std::vector<int> identity{0, 1};
  const auto p = plain_manifest(6);
  const auto same = merge_classes(p, identity, p.categories);
  CHECK(to_json(same) == to_json(p));

  DatasetManifest counts = plain_manifest(0);
  for (int i = 0; i < 5; ++i) counts.items.push_back(item_of("a" + std::to_string(i), 32, 32, {{0, 1, 1, 3, 3}}));
  for (int i = 0; i < 7; ++i) counts.items.push_back(item_of("b" + std::to_string(i), 32, 32, {{1, 1, 1, 3, 3}}));
  const std::vector<int> both{0, 0};
  const auto one = merge_classes(counts, both, {"all"});
  CHECK(total_boxes(one) == 12);

  const std::vector<int> partial{0};
  CHECK_THROWS_AS(merge_classes(counts, partial, {"a"}), ValidationError);
}

TEST_CASE("top-k selection keeps the most frequent classes") {
  DatasetManifest m = plain_manifest(0, 4);
  m.items.push_back(item_of("x", 32, 32, {{2, 1, 1, 3, 3}, {2, 1, 1, 3, 3}, {0, 1, 1, 3, 3}}));
  m.items.push_back(item_of("y", 32, 32, {{3, 1, 1, 3, 3}}));
  m.items.push_back(item_of("z", 32, 32, {{2, 1, 1, 3, 3}, {1, 1, 1, 3, 3}}));
  const auto top = select_top_k_classes(m, 2);
  CHECK(top.categories == std::vector<std::string>{"c0", "c2"});
  REQUIRE(top.items.size() == 2);
  CHECK(top.items[0].ann.image_id == "x");
  CHECK(top.items[1].ann.boxes == std::vector<Box>{{1, 1, 1, 3, 3}});
  CHECK_THROWS_AS(select_top_k_classes(m, 0), ValidationError);
}

TEST_CASE("seeded 70-10-20 split") {
  const auto m = plain_manifest(100);
  const auto a = split_dataset(m, {0.7, 0.1, 0.2}, 42);
  const auto b = split_dataset(m, {0.7, 0.1, 0.2}, 42);
  CHECK(items_in_split(a, Split::Train).size() == 70);
  CHECK(items_in_split(a, Split::Val).size() == 10);
  CHECK(items_in_split(a, Split::Test).size() == 20);
  for (std::size_t i = 0; i < m.items.size(); ++i) CHECK(a.items[i].split == b.items[i].split);
  const auto c = split_dataset(m, {0.7, 0.1, 0.2}, 43);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < m.items.size(); ++i) differ += a.items[i].split != c.items[i].split;
  CHECK(differ > 0);

  const auto all = split_dataset(m, {1, 0, 0}, 1);
  CHECK(items_in_split(all, Split::Train).size() == 100);

  CHECK_THROWS_AS(split_dataset(m, {0.5, 0.1, 0.1}, 1), ValidationError);
  CHECK_THROWS_AS(split_dataset(m, {1.2, -0.1, -0.1}, 1), ValidationError);
  CHECK_THROWS_AS(split_dataset(plain_manifest(2), {0.7, 0.1, 0.2}, 1), ValidationError);
}

TEST_CASE("property: split fractions stay within one item of the ratio") {
  for (int n : {3, 7, 10, 33, 57, 101}) {
    const auto s = split_dataset(plain_manifest(n), {0.7, 0.1, 0.2}, n);
    const double sizes[3] = {static_cast<double>(items_in_split(s, Split::Train).size()),
                             static_cast<double>(items_in_split(s, Split::Val).size()),
                             static_cast<double>(items_in_split(s, Split::Test).size())};
    CHECK(std::abs(sizes[0] - 0.7 * n) <= 1.0);
    CHECK(std::abs(sizes[1] - 0.1 * n) <= 1.0);
    CHECK(std::abs(sizes[2] - 0.2 * n) <= 1.0);
    CHECK(sizes[0] + sizes[1] + sizes[2] == n);
  }
}

TEST_CASE("property: patches never straddle splits") {
  DatasetManifest m = plain_manifest(0);
  for (int i = 0; i < 30; ++i) m.items.push_back(item_of("big" + std::to_string(i), 96, 64, {{0, 40, 20, 60, 40}}));
  const auto split = split_dataset(m, {0.7, 0.1, 0.2}, 9);
  std::vector<DatasetItem> tiles;
  for (const auto& it : split.items)
    for (auto& t : patch_image(it, 32)) tiles.push_back(std::move(t));
  CHECK(tiles.size() == 30 * 6);
  std::map<std::string, std::set<Split>> seen;
  for (const auto& t : tiles) seen[t.source_id].insert(t.split);
  for (const auto& [src, splits] : seen) CHECK(splits.size() == 1);

  // Splitting after patching groups tiles by their source.
  DatasetManifest patched = m;
  patched.items = tiles;
  const auto resplit = split_dataset(patched, {0.7, 0.1, 0.2}, 9);
  seen.clear();
  for (const auto& t : resplit.items) seen[t.source_id].insert(t.split);
  for (const auto& [src, splits] : seen) CHECK(splits.size() == 1);
}

TEST_CASE("property: box counts are conserved through resize, merge and patching") {
  auto m = synth_dataset({.classes = 3, .images = 12, .width = 150, .height = 110, .count_max = 12, .seed = 4});
  const std::size_t before = total_boxes(m);
  for (auto& it : m.items) it = resize_to_max_width(it, 100);
  CHECK(total_boxes(m) == before);
  const std::vector<int> map{0, 1, 1};
  m = merge_classes(m, map, {"a", "b"});
  CHECK(total_boxes(m) == before);
  CHECK(total_boxes(patch_dataset(m, 32)) == before);
}

TEST_CASE("synthetic scenes") {
  const SynthSpec spec{.classes = 3, .images = 20, .count_min = 0, .count_max = 15, .seed = 7};
  const auto a = synth_dataset(spec), b = synth_dataset(spec);
  CHECK(a.items.size() == 20);
  CHECK(a.num_classes() == 3);
  CHECK(to_json(a) == to_json(b));
  for (std::size_t i = 0; i < a.items.size(); ++i) CHECK(a.items[i].image == b.items[i].image);
  for (const auto& it : a.items)
    for (const auto& box : it.ann.boxes) {
      CHECK(box.x_min >= 0);
      CHECK(box.x_max <= 64);
    }

  auto single = spec;
  single.sparsity = 1.0;
  for (const auto& it : synth_dataset(single).items) {
    std::set<int> classes;
    for (const auto& box : it.ann.boxes) classes.insert(box.class_id);
    CHECK(classes.size() == 1);
  }
  CHECK_THROWS_AS(synth_dataset({.classes = 0}), ValidationError);
  CHECK_THROWS_AS(synth_dataset({.sparsity = 1.5}), ValidationError);
}

TEST_CASE("class presence is uniform over subsets without sparsity") {
  const auto m = synth_dataset({.classes = 3, .images = 1000, .width = 32, .height = 32, .count_max = 2, .sparsity = 0.0, .seed = 99});
  std::vector<int> hist(8, 0);
  for (const auto& it : m.items) {
    int mask = 0;
    for (const auto& b : it.ann.boxes) mask |= 1 << b.class_id;
    ++hist[mask];
  }
  double chi2 = 0;
  for (int h : hist) chi2 += (h - 125.0) * (h - 125.0) / 125.0;
  CHECK(chi2 < 24.32);  // 7 degrees of freedom, p = 0.001
}

TEST_CASE("manifests round-trip through disk") {
  TempDir dir("manifest");
  auto m = split_dataset(synth_dataset({.classes = 2, .images = 5, .seed = 3}), {0.6, 0.2, 0.2}, 3);
  write_manifest(m, dir.path / "manifest.json");
  CHECK(fs::exists(dir.path / "images" / "synth0.png"));
  const auto back = read_manifest(dir.path / "manifest.json");
  CHECK(to_json(back) == to_json(m));
  CHECK(manifest_hash(back) == manifest_hash(m));
  const Image img = item_image(back, back.items[2]);
  CHECK(img.width == 64);
  double worst = 0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) worst = std::max(worst, std::abs(double(img.pixels[i] - m.items[2].image->pixels[i])));
  CHECK(worst <= 0.5 / 255 + 1e-6);

  auto changed = m;
  changed.items[0].ann.boxes[0].x_min += 1;
  CHECK(manifest_hash(changed) != manifest_hash(m));
}

TEST_CASE("manifest parsing errors") {
  CHECK_THROWS_AS(manifest_from_json(nlohmann::json::parse(R"({"images": []})")), ValidationError);
  CHECK_THROWS_AS(manifest_from_json(nlohmann::json::parse(
                      R"({"categories": ["a"], "images": [{"id": "x", "width": 8, "height": 8, "boxes": [[3, 0, 0, 2, 2]]}]})")),
                  ValidationError);
  CHECK_THROWS_AS(manifest_from_json(nlohmann::json::parse(
                      R"({"categories": ["a"], "images": [{"id": "x", "width": 8, "height": 8, "boxes": [[0, 0, 0]]}]})")),
                  ValidationError);
  CHECK_THROWS_AS(read_manifest("/nonexistent/manifest.json"), RuntimeError);
  CHECK(parse_split("val") == Split::Val);
  CHECK_THROWS_AS(parse_split("holdout"), ValidationError);
}

TEST_CASE("VisDrone adapter") {
  TempDir dir("visdrone");
  fs::create_directories(dir.path / "images");
  fs::create_directories(dir.path / "annotations");
  save_png(Image(40, 30), dir.path / "images" / "0001.jpg");
  std::ofstream(dir.path / "annotations" / "0001.txt") << "1,2,10,8,1,1,0,0\n"
                                                       << "5,5,4,4,0,0,0,0\n"
                                                       << "3,3,6,6,1,11,0,0\n"
                                                       << "20,10,5,5,1,8,0,1\n";
  const auto m = read_visdrone(dir.path / "images", dir.path / "annotations");
  REQUIRE(m.items.size() == 1);
  CHECK(m.num_classes() == 10);
  CHECK(m.items[0].ann.width == 40);
  CHECK(m.items[0].ann.boxes == std::vector<Box>{{0, 1, 2, 11, 10}, {7, 20, 10, 25, 15}});
  const auto merged = merge_classes(m, visdrone_merge_mapping(), visdrone_categories(true));
  CHECK(merged.items[0].ann.boxes[1].class_id == 5);

  std::ofstream(dir.path / "annotations" / "0001.txt") << "1,2,oops\n";
  CHECK_THROWS_AS(read_visdrone(dir.path / "images", dir.path / "annotations"), ValidationError);
}

TEST_CASE("iSAID adapter") {
  TempDir dir("isaid");
  std::ofstream(dir.path / "instances.json") << R"({
    "images": [{"id": 1, "file_name": "P0001.png", "width": 900, "height": 700}],
    "categories": [{"id": 2, "name": "plane"}, {"id": 1, "name": "ship"}],
    "annotations": [{"image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]},
                    {"image_id": 1, "category_id": 2, "bbox": [100, 100, 10, 10]}]})";
  const auto all = read_isaid(dir.path / "instances.json", dir.path);
  CHECK(all.categories == std::vector<std::string>{"ship", "plane"});
  CHECK(all.items[0].ann.boxes == std::vector<Box>{{0, 10, 20, 40, 60}, {1, 100, 100, 110, 110}});
  const auto planes = read_isaid(dir.path / "instances.json", dir.path, {"plane"});
  CHECK(planes.items[0].ann.boxes == std::vector<Box>{{0, 100, 100, 110, 110}});
  CHECK_THROWS_AS(read_isaid(dir.path / "instances.json", dir.path, {"harbor"}), ValidationError);
  CHECK(patch_image(all.items[0], 800).size() == 2);
}

}  // TEST_SUITE
