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

#include "mcc/density_gt.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "mcc/error.hpp"

namespace mcc {

double DensityMap::channel_sum(int c) const {
  const std::size_t n = static_cast<std::size_t>(height()) * width();
  const double* p = raster.data() + c * n;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i];
  return s;
}

std::size_t BinaryRaster::count_ones(int c) const {
  const std::size_t n = static_cast<std::size_t>(height_) * width_;
  return static_cast<std::size_t>(std::count(bits_.begin() + c * n, bits_.begin() + (c + 1) * n, std::uint8_t{1}));
}

AnnotationSet validated(const AnnotationSet& ann, int num_classes) {
  if (num_classes < 1) fail_validation("num_classes must be >= 1");
  if (ann.width <= 0 || ann.height <= 0)
    fail_validation("image '" + ann.image_id + "' has non-positive size");
  AnnotationSet out = ann;
  for (std::size_t i = 0; i < out.boxes.size(); ++i) {
    Box& b = out.boxes[i];
    const std::string where = "image '" + ann.image_id + "' box " + std::to_string(i);
    if (b.class_id < 0 || b.class_id >= num_classes)
      fail_validation(where + ": class id " + std::to_string(b.class_id) + " outside [0," +
                      std::to_string(num_classes) + ")");
    if (!std::isfinite(b.x_min) || !std::isfinite(b.y_min) || !std::isfinite(b.x_max) || !std::isfinite(b.y_max))
      fail_validation(where + ": non-finite coordinate");
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(ann.width));
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(ann.width));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(ann.height));
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(ann.height));
    if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) fail_validation(where + ": degenerate (zero-area) box");
  }
  return out;
}

ClassPoints bbox_to_centroids(const AnnotationSet& ann, int num_classes) {
  const AnnotationSet checked = validated(ann, num_classes);
  ClassPoints pts(num_classes);
  for (const Box& b : checked.boxes)
    pts[b.class_id].push_back({(b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0});
  return pts;
}

int kernel_radius(double sigma) { return static_cast<int>(std::ceil(3.0 * sigma)); }

DensityMap render_density_map(const ClassPoints& centroids, int height, int width, double sigma, RenderStats* stats) {
  if (!(sigma > 0)) fail_validation("sigma must be > 0");
  if (height <= 0 || width <= 0) fail_validation("raster shape must be positive");
  const int classes = static_cast<int>(centroids.size());
  DensityMap map(classes, height, width);
  const int r = kernel_radius(sigma);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> wx(2 * r + 1), wy(2 * r + 1);
  for (int c = 0; c < classes; ++c) {
    for (Point p : centroids[c]) {
      bool clamped = false;
      if (!(p.x >= 0 && p.x < width)) {
        p.x = std::clamp(std::floor(p.x), 0.0, width - 1.0) + 0.5;
        clamped = true;
      }
      if (!(p.y >= 0 && p.y < height)) {
        p.y = std::clamp(std::floor(p.y), 0.0, height - 1.0) + 0.5;
        clamped = true;
      }
      if (clamped && stats) ++stats->clamped_centroids;
      const int px = static_cast<int>(std::floor(p.x));
      const int py = static_cast<int>(std::floor(p.y));
      // Separable kernel sampled at pixel centres, unit mass over the full window.
      double sx = 0.0, sy = 0.0;
      for (int d = -r; d <= r; ++d) {
        const double dx = px + d + 0.5 - p.x;
        const double dy = py + d + 0.5 - p.y;
        wx[d + r] = std::exp(-dx * dx * inv2s2);
        wy[d + r] = std::exp(-dy * dy * inv2s2);
        sx += wx[d + r];
        sy += wy[d + r];
      }
      const double norm = 1.0 / (sx * sy);
      for (int di = -r; di <= r; ++di) {
        const int i = py + di;
        if (i < 0 || i >= height) continue;
        for (int dj = -r; dj <= r; ++dj) {
          const int j = px + dj;
          if (j < 0 || j >= width) continue;
          map.at(c, i, j) += wy[di + r] * wx[dj + r] * norm;
        }
      }
    }
  }
  return map;
}

DensityMap renormalize_classwise(DensityMap map, std::span<const int> counts) {
  if (static_cast<int>(counts.size()) != map.classes())
    fail_validation("renormalize_classwise: " + std::to_string(counts.size()) + " counts for " +
                    std::to_string(map.classes()) + " classes");
  const std::size_t n = static_cast<std::size_t>(map.height()) * map.width();
  for (int c = 0; c < map.classes(); ++c) {
    double* p = map.raster.data() + c * n;
    if (counts[c] < 0) fail_validation("negative count for class " + std::to_string(c));
    if (counts[c] == 0) {
      std::fill(p, p + n, 0.0);
      continue;
    }
    const double s = map.channel_sum(c);
    if (!(s > 0))
      fail_validation("class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                      " annotations but an empty density channel");
    const double k = counts[c] / s;
    for (std::size_t i = 0; i < n; ++i) p[i] *= k;
  }
  return map;
}

RegionMask build_region_masks(const DensityMap& gt) {
  RegionMask mask(gt.classes(), gt.height(), gt.width());
  for (int c = 0; c < gt.classes(); ++c)
    for (int i = 0; i < gt.height(); ++i)
      for (int j = 0; j < gt.width(); ++j) mask.set(c, i, j, gt.at(c, i, j) > 0.0);
  return mask;
}

SegTarget build_segmentation_target(const DensityMap& gt) { return SegTarget{build_region_masks(gt)}; }

DensityMap downsample_sum_preserving(const DensityMap& map, int factor) {
  if (factor < 1) fail_validation("downsample factor must be >= 1");
  if (map.height() % factor || map.width() % factor)
    fail_validation("downsample factor " + std::to_string(factor) + " does not divide raster " +
                    std::to_string(map.height()) + "x" + std::to_string(map.width()) +
                    "; pad the image to a multiple of the factor first");
  if (factor == 1) return map;
  DensityMap out(map.classes(), map.height() / factor, map.width() / factor, map.resolution_scale * factor);
  for (int c = 0; c < map.classes(); ++c)
    for (int i = 0; i < map.height(); ++i)
      for (int j = 0; j < map.width(); ++j) out.at(c, i / factor, j / factor) += map.at(c, i, j);
  return out;
}

std::vector<int> class_box_counts(const AnnotationSet& ann, int num_classes) {
  std::vector<int> counts(num_classes, 0);
  for (const Box& b : ann.boxes) {
    if (b.class_id < 0 || b.class_id >= num_classes) fail_validation("class id out of range in '" + ann.image_id + "'");
    ++counts[b.class_id];
  }
  return counts;
}

DensityMap build_ground_truth(const AnnotationSet& ann, int num_classes, const GtConfig& config, RenderStats* stats) {
  const ClassPoints pts = bbox_to_centroids(ann, num_classes);
  DensityMap map = render_density_map(pts, ann.height, ann.width, config.sigma, stats);
  const std::vector<int> counts = class_box_counts(ann, num_classes);
  map = renormalize_classwise(std::move(map), counts);
  return downsample_sum_preserving(map, config.stride);
}

std::vector<std::uint8_t> encode_dmap(const DensityMap& map) {
  std::vector<std::uint8_t> out;
  out.reserve(17 + map.raster.numel() * 4);
  detail::put_bytes(out, "DMAP");
  out.push_back(kDmapVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(map.classes()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.width()));
  for (double v : map.raster.values()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

DensityMap decode_dmap(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (in.str(4) != "DMAP") fail_validation("not a DMAP raster (bad magic)");
  const std::uint8_t version = in.u8();
  if (version != kDmapVersion) fail_validation("unsupported DMAP version " + std::to_string(version));
  const auto c = in.u32(), h = in.u32(), w = in.u32();
  if (static_cast<std::uint64_t>(c) * h * w * 4 != bytes.size() - 17)
    fail_validation("DMAP payload size does not match header");
  DensityMap map(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
  for (auto& v : map.raster.values()) v = in.f32();
  return map;
}

void write_dmap(const DensityMap& map, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_dmap(map));
}

DensityMap read_dmap(const std::filesystem::path& path) { return decode_dmap(detail::read_file_bytes(path)); }

}  // namespace mcc
