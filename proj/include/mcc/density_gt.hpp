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

// Ground-truth generation: box annotations -> per-class density maps whose
// channel sums equal the box counts, plus the binary rasters derived from
// them (region masks for the regional loss, segmentation targets for the
// masking head).

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mcc/tensor.hpp"

namespace mcc {

struct Box {
  int class_id = 0;
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool operator==(const Box&) const = default;
};

struct AnnotationSet {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<Box> boxes;

  bool operator==(const AnnotationSet&) const = default;
};

struct Point {
  double x = 0, y = 0;
  bool operator==(const Point&) const = default;
};

/// centroids[c] holds the points of class c.
using ClassPoints = std::vector<std::vector<Point>>;

/// C x H x W raster of objects-per-pixel.
struct DensityMap {
  Tensor raster;
  int resolution_scale = 1;  // output stride relative to the source image

  DensityMap() = default;
  DensityMap(int classes, int height, int width, int scale = 1) : raster({classes, height, width}), resolution_scale(scale) {}

  int classes() const { return raster.dim(0); }
  int height() const { return raster.dim(1); }
  int width() const { return raster.dim(2); }
  double& at(int c, int i, int j) { return raster.at(c, i, j); }
  double at(int c, int i, int j) const { return raster.at(c, i, j); }
  double channel_sum(int c) const;
};

/// C x H x W binary raster.
class BinaryRaster {
 public:
  BinaryRaster() = default;
  BinaryRaster(int classes, int height, int width)
      : classes_(classes), height_(height), width_(width), bits_(static_cast<std::size_t>(classes) * height * width, 0) {}

  int classes() const { return classes_; }
  int height() const { return height_; }
  int width() const { return width_; }
  bool at(int c, int i, int j) const { return bits_[index(c, i, j)] != 0; }
  void set(int c, int i, int j, bool v) { bits_[index(c, i, j)] = v ? 1 : 0; }
  std::size_t count_ones(int c) const;
  std::span<const std::uint8_t> bits() const { return bits_; }

 private:
  std::size_t index(int c, int i, int j) const { return (static_cast<std::size_t>(c) * height_ + i) * width_ + j; }
  int classes_ = 0, height_ = 0, width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// 1 where the ground-truth density is strictly positive.
using RegionMask = BinaryRaster;

/// Per-class positive indicator; background is the complement and is not stored.
struct SegTarget {
  BinaryRaster positive;
  bool background(int c, int i, int j) const { return !positive.at(c, i, j); }
};

struct RenderStats {
  int clamped_centroids = 0;
};

struct GtConfig {
  double sigma = 4.0;  // px at source resolution
  int stride = 4;      // model output stride
};

/// Checks box geometry and class ids, clamping coordinates into the image.
/// Throws ValidationError naming the offending box index.
AnnotationSet validated(const AnnotationSet& ann, int num_classes);

ClassPoints bbox_to_centroids(const AnnotationSet& ann, int num_classes);

/// Kernel half-width for bandwidth sigma.
int kernel_radius(double sigma);

DensityMap render_density_map(const ClassPoints& centroids, int height, int width, double sigma,
                              RenderStats* stats = nullptr);
DensityMap renormalize_classwise(DensityMap map, std::span<const int> counts);
RegionMask build_region_masks(const DensityMap& gt);
SegTarget build_segmentation_target(const DensityMap& gt);
DensityMap downsample_sum_preserving(const DensityMap& map, int factor);

std::vector<int> class_box_counts(const AnnotationSet& ann, int num_classes);

/// Full pipeline: validate, centroids, render at source resolution,
/// renormalize class-wise, pool to the configured stride.
DensityMap build_ground_truth(const AnnotationSet& ann, int num_classes, const GtConfig& config,
                              RenderStats* stats = nullptr);

// DMAP raster files: "DMAP", version byte, C/H/W as u32 LE, then float32 LE.
inline constexpr std::uint8_t kDmapVersion = 1;
std::vector<std::uint8_t> encode_dmap(const DensityMap& map);
DensityMap decode_dmap(std::span<const std::uint8_t> bytes);
void write_dmap(const DensityMap& map, const std::filesystem::path& path);
DensityMap read_dmap(const std::filesystem::path& path);

}  // namespace mcc
