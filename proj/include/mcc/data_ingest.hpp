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

// Dataset preparation: manifests, resizing, tiling, class merging, seeded
// splits, upstream annotation adapters and a synthetic scene generator.
//
// Manifest JSON is a superset of the annotation file schema:
//   {"name", "seed", "categories": [...],
//    "images": [{"id", "file", "width", "height",
//                "boxes": [[class_id, x_min, y_min, x_max, y_max], ...],
//                "source_id"?, "split"?}]}

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcc/density_gt.hpp"

namespace mcc {

enum class Split { Unassigned, Train, Val, Test };
std::string to_string(Split split);
Split parse_split(const std::string& s);

/// Planar RGB, values in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // 3 * height * width

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(3) * w * h, 0.0f) {}
  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

Image load_image(const std::filesystem::path& path);
void save_png(const Image& image, const std::filesystem::path& path);

struct DatasetItem {
  AnnotationSet ann;
  std::string file;       // relative to the manifest directory
  std::string source_id;  // id of the original (pre-patching) image
  Split split = Split::Unassigned;
  std::optional<Image> image;  // in-memory pixels; takes precedence over file
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> categories;
  std::vector<DatasetItem> items;
  std::uint64_t seed = 0;
  std::filesystem::path base_dir;  // resolves relative item files

  int num_classes() const { return static_cast<int>(categories.size()); }
};

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
DatasetManifest read_manifest(const std::filesystem::path& path);
/// Writes the JSON; in-memory images are saved as PNG under images/ next to it.
void write_manifest(DatasetManifest& manifest, const std::filesystem::path& path);

Image item_image(const DatasetManifest& manifest, const DatasetItem& item);
/// Order-sensitive digest of ids and boxes; keys the ground-truth cache.
std::uint64_t manifest_hash(const DatasetManifest& manifest);

/// Downscales (bilinear) when wider than max_width, scaling boxes by the same
/// factor, then zero-pads both sides up to a multiple of 32. Needs pixels.
DatasetItem resize_to_max_width(DatasetItem item, int max_width);

/// size x size tiles on a grid; the last row/column is anchored to the image
/// edge. Each box goes to the tile whose grid cell holds its centroid
/// (half-open), re-based and clipped. Empty tiles are kept. Images smaller
/// than size yield one zero-padded tile.
std::vector<DatasetItem> patch_image(const DatasetItem& item, int size);
DatasetManifest patch_dataset(const DatasetManifest& manifest, int size);

/// mapping[old_class] = new_class.
DatasetManifest merge_classes(DatasetManifest manifest, std::span<const int> mapping,
                              std::vector<std::string> new_categories);

/// 10-class VisDrone-DET -> 8 classes (pedestrian+people, tricycle+awning-tricycle).
std::vector<int> visdrone_merge_mapping();
std::vector<std::string> visdrone_categories(bool merged);

/// Seeded shuffle of source images, then a contiguous train/val/test cut.
DatasetManifest split_dataset(DatasetManifest manifest, std::array<double, 3> ratios, std::uint64_t seed);

/// Keeps the k most frequent classes (relabelled 0..k-1 in original order)
/// and drops items left without boxes.
DatasetManifest select_top_k_classes(DatasetManifest manifest, int k);

std::vector<DatasetItem> items_in_split(const DatasetManifest& manifest, Split split);

struct SynthSpec {
  int classes = 3;
  int images = 20;
  int width = 64;
  int height = 64;
  int count_min = 0;
  int count_max = 15;
  double sparsity = 0.0;  // probability that a sample holds a single class
  int blob_radius = 3;
  std::uint64_t seed = 0;
};

SynthSpec synth_spec_from_json(const nlohmann::json& j);

/// Procedural scenes: coloured discs per class on a textured background.
/// Without the single-class draw, every subset of classes is equally likely.
DatasetManifest synth_dataset(const SynthSpec& spec);

// Upstream adapters.
DatasetManifest read_visdrone(const std::filesystem::path& images_dir, const std::filesystem::path& annotations_dir);
DatasetManifest read_isaid(const std::filesystem::path& instances_json, const std::filesystem::path& images_dir,
                           const std::vector<std::string>& keep_categories = {});
DatasetManifest read_annotation_file(const std::filesystem::path& path);

}  // namespace mcc
