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
#include <random>

#include "doctest.h"
#include "mcc/density_gt.hpp"
#include "mcc/error.hpp"
#include "oracles.hpp"

using namespace mcc;

namespace {

AnnotationSet boxes_of(int w, int h, std::vector<Box> boxes) { return {"img", w, h, std::move(boxes)}; }

}  // namespace

TEST_SUITE("density_gt") {

TEST_CASE("box midpoints become centroids") {
  auto pts = bbox_to_centroids(boxes_of(64, 64, {{0, 10, 10, 20, 30}}), 1);
  REQUIRE(pts.size() == 1);
  REQUIRE(pts[0].size() == 1);
  CHECK(pts[0][0] == Point{15.0, 20.0});

  pts = bbox_to_centroids(boxes_of(64, 64, {{0, 0, 0, 4, 4}, {0, 4, 4, 8, 8}}), 1);
  CHECK(pts[0] == std::vector<Point>{{2, 2}, {6, 6}});

  pts = bbox_to_centroids(boxes_of(64, 64, {}), 3);
  CHECK(pts.size() == 3);
  for (const auto& p : pts) CHECK(p.empty());
}

TEST_CASE("validation names the offending box") {
  auto bad_class = boxes_of(32, 32, {{0, 1, 1, 5, 5}, {7, 1, 1, 5, 5}});
  CHECK_THROWS_WITH_AS(validated(bad_class, 2), doctest::Contains("box 1"), ValidationError);
  CHECK_THROWS_AS(validated(boxes_of(32, 32, {{0, 5, 5, 5, 9}}), 1), ValidationError);
  CHECK_THROWS_AS(validated(boxes_of(32, 32, {{0, 6, 5, 2, 9}}), 1), ValidationError);
  CHECK_THROWS_AS(validated(boxes_of(32, 32, {{0, NAN, 5, 2, 9}}), 1), ValidationError);
  CHECK_THROWS_AS(validated(boxes_of(0, 32, {}), 1), ValidationError);

  const auto clamped = validated(boxes_of(32, 32, {{0, -4, 2, 40, 8}}), 1);
  CHECK(clamped.boxes[0] == Box{0, 0, 2, 32, 8});
}

TEST_CASE("centred kernel keeps its unit mass") {
  const auto map = render_density_map({{{32, 32}}}, 64, 64, 4.0);
  CHECK(std::abs(map.channel_sum(0) - 1.0) < 1e-4);
  CHECK(render_density_map({{}}, 64, 64, 4.0).channel_sum(0) == 0.0);
}

TEST_CASE("corner kernel keeps about a quarter of its mass") {
  const auto map = render_density_map({{{0, 0}}}, 64, 64, 4.0);
  const auto ref = oracle::gaussian_class({{0, 0}}, 64, 64, 4.0);
  double ref_sum = 0;
  for (const auto& row : ref[0])
    for (double v : row) ref_sum += v;
  CHECK(map.channel_sum(0) == doctest::Approx(ref_sum).epsilon(1e-12));
  CHECK(map.channel_sum(0) == doctest::Approx(0.25).epsilon(0.1));
}

TEST_CASE("rendered kernels match the direct two-dimensional oracle") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ux(-3, 50), uy(-3, 40);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Point> pts;
    for (int k = 0; k < 4; ++k) pts.push_back({ux(rng), uy(rng)});
    std::vector<Point> inside;
    for (auto p : pts)
      if (p.x >= 0 && p.x < 48 && p.y >= 0 && p.y < 36) inside.push_back(p);
    const auto map = render_density_map({inside}, 36, 48, 2.5);
    const auto ref = oracle::gaussian_class(inside, 36, 48, 2.5);
    double worst = 0;
    for (int i = 0; i < 36; ++i)
      for (int j = 0; j < 48; ++j) worst = std::max(worst, std::abs(map.at(0, i, j) - ref[0][i][j]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("out-of-raster centroids are clamped and counted") {
  RenderStats stats;
  const auto map = render_density_map({{{-5, 3}, {70, 70}}}, 64, 64, 2.0, &stats);
  CHECK(stats.clamped_centroids == 2);
  CHECK(map.at(0, 3, 0) > 0);
  CHECK(map.at(0, 63, 63) > 0);
}

TEST_CASE("class-wise renormalisation") {
  DensityMap m(2, 2, 2);
  m.raster = Tensor({2, 2, 2}, {0.2, 0.2, 0.2, 0.22, 0, 0, 0, 0});
  const std::vector<int> counts{1, 0};
  const auto r = renormalize_classwise(m, counts);
  CHECK(r.channel_sum(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.at(0, 1, 1) == doctest::Approx(0.22 / 0.82));
  CHECK(r.channel_sum(1) == 0.0);

  DensityMap three(1, 1, 3);
  three.raster = Tensor({1, 1, 3}, {0.9, 1.0, 1.0});
  const std::vector<int> c3{3};
  CHECK(std::abs(renormalize_classwise(three, c3).channel_sum(0) - 3.0) < 1e-6);

  const std::vector<int> wrong{1};
  CHECK_THROWS_AS(renormalize_classwise(m, wrong), ValidationError);
  DensityMap empty(1, 2, 2);
  CHECK_THROWS_AS(renormalize_classwise(empty, wrong), ValidationError);
}

TEST_CASE("region mask of a centred kernel is its full window") {
  const auto gt = render_density_map({{{32, 32}}, {}}, 64, 64, 4.0);
  const auto mask = build_region_masks(gt);
  CHECK(mask.count_ones(0) == 625);
  CHECK(mask.count_ones(1) == 0);
  CHECK(mask.at(0, 32 - 12, 32 - 12));
  CHECK(mask.at(0, 32 + 12, 32 + 12));
  CHECK_FALSE(mask.at(0, 32 - 13, 32));
}

TEST_CASE("two disjoint kernels give the union of their windows") {
  const auto gt = render_density_map({{{10, 10}, {50, 50}}}, 64, 64, 1.0);
  const auto mask = build_region_masks(gt);
  CHECK(mask.count_ones(0) == 2 * 49);
}

TEST_CASE("segmentation target is the support and allows overlapping classes") {
  const auto gt = render_density_map({{{20, 20}}, {{20, 20}}}, 40, 40, 2.0);
  const auto seg = build_segmentation_target(gt);
  CHECK(seg.positive.at(0, 20, 20));
  CHECK(seg.positive.at(1, 20, 20));
  CHECK(seg.background(0, 0, 0));
  const auto none = build_segmentation_target(DensityMap(2, 8, 8));
  CHECK(none.positive.count_ones(0) == 0);
  CHECK(none.positive.count_ones(1) == 0);
}

TEST_CASE("sum-preserving downsample") {
  DensityMap ones(1, 4, 4);
  ones.raster.fill(1.0);
  const auto d = downsample_sum_preserving(ones, 2);
  CHECK(d.height() == 2);
  CHECK(d.width() == 2);
  for (double v : d.raster.values()) CHECK(v == 4.0);
  CHECK(d.channel_sum(0) == 16.0);
  CHECK(d.resolution_scale == 2);
  CHECK(downsample_sum_preserving(ones, 1).raster == ones.raster);

  auto unit = render_density_map({{{17.3, 40.8}}}, 64, 64, 4.0);
  unit = renormalize_classwise(unit, std::vector<int>{1});
  CHECK(std::abs(downsample_sum_preserving(unit, 4).channel_sum(0) - 1.0) < 1e-9);
  CHECK_THROWS_AS(downsample_sum_preserving(ones, 3), ValidationError);
  CHECK_THROWS_AS(downsample_sum_preserving(ones, 0), ValidationError);
}

TEST_CASE("property: pipeline conserves per-class box counts") {
  std::mt19937_64 rng(2026);
  for (int trial = 0; trial < 100; ++trial) {
    const auto ann = oracle::random_annotations(rng, 3, 64, 96, 12);
    const auto counts = class_box_counts(ann, 3);
    for (int stride : {1, 4}) {
      const auto gt = build_ground_truth(ann, 3, GtConfig{4.0, stride});
      for (int c = 0; c < 3; ++c) CHECK(std::abs(gt.channel_sum(c) - counts[c]) < 1e-6);
    }
  }
}

TEST_CASE("property: pooling commutes with counting") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    DensityMap m(2, 16, 16);
    m.raster = oracle::random_tensor({2, 16, 16}, rng, 0.0, 1.0);
    for (int f : {2, 4, 8})
      for (int c = 0; c < 2; ++c) CHECK(std::abs(downsample_sum_preserving(m, f).channel_sum(c) - m.channel_sum(c)) < 1e-9);
  }
}

TEST_CASE("property: region mask is exactly the nonzero set") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const auto gt = build_ground_truth(oracle::random_annotations(rng, 2, 32, 32, 5), 2, GtConfig{2.0, 1});
    const auto mask = build_region_masks(gt);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) REQUIRE((gt.at(c, i, j) > 0) == mask.at(c, i, j));
  }
}

TEST_CASE("property: ground truth is deterministic and non-negative") {
  std::mt19937_64 rng(77);
  const auto ann = oracle::random_annotations(rng, 4, 64, 64, 20);
  const auto a = build_ground_truth(ann, 4, {});
  const auto b = build_ground_truth(ann, 4, {});
  CHECK(a.raster == b.raster);
  for (double v : a.raster.values()) CHECK(v >= 0.0);
}

TEST_CASE("DMAP files round-trip at float precision") {
  std::mt19937_64 rng(3);
  const auto gt = build_ground_truth(oracle::random_annotations(rng, 2, 64, 32, 6), 2, {});
  const auto path = std::filesystem::temp_directory_path() / "mcc_test_roundtrip.dmap";
  write_dmap(gt, path);
  const auto back = read_dmap(path);
  std::filesystem::remove(path);
  REQUIRE(back.raster.shape() == gt.raster.shape());
  for (std::size_t i = 0; i < gt.raster.numel(); ++i)
    CHECK(back.raster[i] == static_cast<double>(static_cast<float>(gt.raster[i])));

  auto bytes = encode_dmap(gt);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DMAP");
  bytes[4] = 9;
  CHECK_THROWS_AS(decode_dmap(bytes), ValidationError);
  bytes = encode_dmap(gt);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_dmap(bytes), ValidationError);
}

}  // TEST_SUITE
