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

#include "mcc/data_ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mcc/error.hpp"
#include "random.hpp"

namespace fs = std::filesystem;

namespace mcc {

std::string to_string(Split split) {
  switch (split) {
    case Split::Unassigned: return "unassigned";
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  for (auto v : {Split::Unassigned, Split::Train, Split::Val, Split::Test})
    if (to_string(v) == s) return v;
  fail_validation("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// Images

Image load_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) fail_runtime("cannot read image " + path.string());
  Image img(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[x][2 - c] / 255.0f;
  }
  return img;
}

void save_png(const Image& image, const fs::path& path) {
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[x][2 - c] = cv::saturate_cast<uchar>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) fail_runtime("cannot write image " + path.string());
}

namespace {

cv::Mat to_mat(const Image& img) {
  cv::Mat m(img.height, img.width, CV_32FC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[x][c] = img.at(c, y, x);
  }
  return m;
}

Image from_mat(const cv::Mat& m) {
  Image img(m.cols, m.rows);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < m.cols; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[x][c];
  }
  return img;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace

// ---------------------------------------------------------------------------
// Manifest I/O

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["name"] = m.name;
  j["seed"] = m.seed;
  j["categories"] = m.categories;
  j["images"] = nlohmann::json::array();
  for (const auto& it : m.items) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : it.ann.boxes) boxes.push_back({b.class_id, b.x_min, b.y_min, b.x_max, b.y_max});
    nlohmann::json e = {{"id", it.ann.image_id}, {"file", it.file},         {"width", it.ann.width},
                        {"height", it.ann.height}, {"boxes", boxes},         {"source_id", it.source_id}};
    if (it.split != Split::Unassigned) e["split"] = to_string(it.split);
    j["images"].push_back(std::move(e));
  }
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  try {
    m.name = j.value("name", std::string());
    m.seed = j.value("seed", std::uint64_t{0});
    m.categories = j.at("categories").get<std::vector<std::string>>();
    for (const auto& e : j.at("images")) {
      DatasetItem it;
      it.ann.image_id = e.at("id").is_string() ? e.at("id").get<std::string>() : e.at("id").dump();
      it.file = e.value("file", std::string());
      it.ann.width = e.at("width").get<int>();
      it.ann.height = e.at("height").get<int>();
      for (const auto& b : e.at("boxes")) {
        if (!b.is_array() || b.size() != 5) fail_validation("image '" + it.ann.image_id + "': box must be [class_id, x_min, y_min, x_max, y_max]");
        it.ann.boxes.push_back({b[0].get<int>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>(), b[4].get<double>()});
      }
      it.source_id = e.value("source_id", it.ann.image_id);
      if (it.source_id.empty()) it.source_id = it.ann.image_id;
      if (e.contains("split")) it.split = parse_split(e.at("split").get<std::string>());
      m.items.push_back(std::move(it));
    }
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("manifest: ") + e.what());
  }
  for (const auto& it : m.items) (void)validated(it.ann, std::max(1, m.num_classes()));
  return m;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail_validation(path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

DatasetManifest read_annotation_file(const fs::path& path) { return read_manifest(path); }

void write_manifest(DatasetManifest& m, const fs::path& path) {
  const fs::path dir = path.parent_path();
  for (auto& it : m.items) {
    if (!it.image) continue;
    if (it.file.empty()) it.file = "images/" + it.ann.image_id + ".png";
    save_png(*it.image, dir / it.file);
  }
  if (!dir.empty()) fs::create_directories(dir);
  std::ofstream out(path);
  out << to_json(m).dump(1) << "\n";
  if (!out) fail_runtime("cannot write manifest " + path.string());
  m.base_dir = dir;
}

Image item_image(const DatasetManifest& m, const DatasetItem& it) {
  if (it.image) return *it.image;
  if (it.file.empty()) fail_validation("item '" + it.ann.image_id + "' has neither pixels nor a file");
  fs::path p = it.file;
  if (p.is_relative()) p = m.base_dir / p;
  return load_image(p);
}

std::uint64_t manifest_hash(const DatasetManifest& m) {
  // FNV-1a over a canonical text rendering.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
  };
  for (const auto& c : m.categories) mix(c + "\x1f");
  for (const auto& it : m.items) {
    std::ostringstream os;
    os.precision(17);
    os << it.ann.image_id << '|' << it.ann.width << 'x' << it.ann.height;
    for (const auto& b : it.ann.boxes) os << '|' << b.class_id << ',' << b.x_min << ',' << b.y_min << ',' << b.x_max << ',' << b.y_max;
    mix(os.str() + "\x1e");
  }
  return h;
}

// ---------------------------------------------------------------------------
// Resize / patch

DatasetItem resize_to_max_width(DatasetItem item, int max_width) {
  if (max_width <= 0) fail_validation("max_width must be > 0");
  if (!item.image) fail_validation("resize_to_max_width needs the image pixels of '" + item.ann.image_id + "'");
  Image img = std::move(*item.image);
  if (img.width > max_width) {
    const double s = static_cast<double>(max_width) / img.width;
    const int nh = std::max(1, static_cast<int>(std::lround(img.height * s)));
    cv::Mat out;
    cv::resize(to_mat(img), out, cv::Size(max_width, nh), 0, 0, cv::INTER_LINEAR);
    img = from_mat(out);
    for (Box& b : item.ann.boxes) {
      b.x_min *= s;
      b.y_min *= s;
      b.x_max *= s;
      b.y_max *= s;
    }
  }
  const int pw = round_up(img.width, 32), ph = round_up(img.height, 32);
  if (pw != img.width || ph != img.height) {
    Image padded(pw, ph);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) padded.at(c, y, x) = img.at(c, y, x);
    img = std::move(padded);
  }
  item.ann.width = img.width;
  item.ann.height = img.height;
  item.image = std::move(img);
  return item;
}

namespace {

// Tile offsets and the start of each tile's ownership cell along one axis.
struct AxisTiles {
  std::vector<int> offset;
  std::vector<double> own_lo, own_hi;
};

AxisTiles axis_tiles(int extent, int size) {
  AxisTiles t;
  if (extent <= size) {
    t.offset = {0};
    t.own_lo = {-INFINITY};
    t.own_hi = {INFINITY};
    return t;
  }
  for (int k = 0;; ++k) {
    const int nominal = k * size;
    if (nominal >= extent) break;
    t.offset.push_back(std::min(nominal, extent - size));
    t.own_lo.push_back(k == 0 ? -INFINITY : nominal);
    t.own_hi.push_back(nominal + size >= extent ? INFINITY : nominal + size);
  }
  return t;
}

}  // namespace

std::vector<DatasetItem> patch_image(const DatasetItem& item, int size) {
  if (size <= 0) fail_validation("patch size must be > 0");
  const int W = item.ann.width, H = item.ann.height;
  const AxisTiles tx = axis_tiles(W, size), ty = axis_tiles(H, size);
  std::vector<DatasetItem> out;
  for (std::size_t r = 0; r < ty.offset.size(); ++r) {
    for (std::size_t c = 0; c < tx.offset.size(); ++c) {
      const int ox = tx.offset[c], oy = ty.offset[r];
      DatasetItem tile;
      tile.ann.image_id = item.ann.image_id + "_p" + std::to_string(r) + "_" + std::to_string(c);
      tile.ann.width = size;
      tile.ann.height = size;
      tile.source_id = item.source_id.empty() ? item.ann.image_id : item.source_id;
      tile.split = item.split;
      for (const Box& b : item.ann.boxes) {
        const double cx = (b.x_min + b.x_max) / 2, cy = (b.y_min + b.y_max) / 2;
        if (cx < tx.own_lo[c] || cx >= tx.own_hi[c] || cy < ty.own_lo[r] || cy >= ty.own_hi[r]) continue;
        Box nb = b;
        nb.x_min = std::clamp(b.x_min - ox, 0.0, static_cast<double>(std::min(size, W - ox)));
        nb.x_max = std::clamp(b.x_max - ox, 0.0, static_cast<double>(std::min(size, W - ox)));
        nb.y_min = std::clamp(b.y_min - oy, 0.0, static_cast<double>(std::min(size, H - oy)));
        nb.y_max = std::clamp(b.y_max - oy, 0.0, static_cast<double>(std::min(size, H - oy)));
        tile.ann.boxes.push_back(nb);
      }
      if (item.image) {
        Image img(size, size);
        for (int ch = 0; ch < 3; ++ch)
          for (int y = 0; y < size && oy + y < H; ++y)
            for (int x = 0; x < size && ox + x < W; ++x) img.at(ch, y, x) = item.image->at(ch, oy + y, ox + x);
        tile.image = std::move(img);
      }
      out.push_back(std::move(tile));
    }
  }
  return out;
}

DatasetManifest patch_dataset(const DatasetManifest& m, int size) {
  DatasetManifest out = m;
  out.items.clear();
  for (const auto& it : m.items) {
    DatasetItem src = it;
    if (!src.image) src.image = item_image(m, it);
    for (auto& t : patch_image(src, size)) out.items.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class relabelling

DatasetManifest merge_classes(DatasetManifest m, std::span<const int> mapping, std::vector<std::string> new_categories) {
  const int nc = static_cast<int>(new_categories.size());
  for (auto& it : m.items) {
    for (Box& b : it.ann.boxes) {
      if (b.class_id < 0 || b.class_id >= static_cast<int>(mapping.size()) || mapping[b.class_id] < 0)
        fail_validation("class id " + std::to_string(b.class_id) + " in '" + it.ann.image_id + "' has no mapping");
      b.class_id = mapping[b.class_id];
      if (b.class_id >= nc) fail_validation("mapping target outside the new category list");
    }
  }
  m.categories = std::move(new_categories);
  return m;
}

std::vector<std::string> visdrone_categories(bool merged) {
  if (merged) return {"people", "bicycle", "car", "van", "truck", "tricycle", "bus", "motor"};
  return {"pedestrian", "people", "bicycle", "car", "van", "truck", "tricycle", "awning-tricycle", "bus", "motor"};
}

std::vector<int> visdrone_merge_mapping() { return {0, 0, 1, 2, 3, 4, 5, 5, 6, 7}; }

DatasetManifest select_top_k_classes(DatasetManifest m, int k) {
  const int C = m.num_classes();
  if (k < 1) fail_validation("top-k needs k >= 1");
  if (k >= C) return m;
  std::vector<std::size_t> freq(C, 0);
  for (const auto& it : m.items)
    for (const Box& b : it.ann.boxes) {
      if (b.class_id < 0 || b.class_id >= C) fail_validation("class id out of range in '" + it.ann.image_id + "'");
      ++freq[b.class_id];
    }
  std::vector<int> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return freq[a] > freq[b]; });
  std::vector<int> kept(order.begin(), order.begin() + k);
  std::sort(kept.begin(), kept.end());
  std::vector<int> remap(C, -1);
  std::vector<std::string> cats;
  for (int i = 0; i < k; ++i) {
    remap[kept[i]] = i;
    cats.push_back(m.categories[kept[i]]);
  }
  std::vector<DatasetItem> items;
  for (auto& it : m.items) {
    std::vector<Box> boxes;
    for (Box b : it.ann.boxes)
      if (remap[b.class_id] >= 0) {
        b.class_id = remap[b.class_id];
        boxes.push_back(b);
      }
    if (boxes.empty()) continue;
    it.ann.boxes = std::move(boxes);
    items.push_back(std::move(it));
  }
  m.items = std::move(items);
  m.categories = std::move(cats);
  return m;
}

// ---------------------------------------------------------------------------
// Splits

DatasetManifest split_dataset(DatasetManifest m, std::array<double, 3> ratios, std::uint64_t seed) {
  double total = 0;
  for (double r : ratios) {
    if (r < 0) fail_validation("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) fail_validation("split ratios must sum to 1");
  std::set<std::string> unique;
  for (const auto& it : m.items) unique.insert(it.source_id.empty() ? it.ann.image_id : it.source_id);
  std::vector<std::string> sources(unique.begin(), unique.end());
  const std::size_t n = sources.size();
  const auto nonzero = std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; });
  if (n < static_cast<std::size_t>(nonzero))
    fail_validation("cannot split " + std::to_string(n) + " source images into " + std::to_string(nonzero) + " subsets");

  std::mt19937_64 rng(seed);
  detail::shuffle(sources, rng);
  std::size_t n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
  std::size_t n_val = static_cast<std::size_t>(std::llround(ratios[1] * n));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  if (ratios[2] == 0) n_val = n - n_train;
  if (ratios[1] == 0 && ratios[2] == 0) n_train = n;

  std::map<std::string, Split> assign;
  for (std::size_t i = 0; i < n; ++i)
    assign[sources[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
  for (auto& it : m.items) it.split = assign.at(it.source_id.empty() ? it.ann.image_id : it.source_id);
  m.seed = seed;
  return m;
}

std::vector<DatasetItem> items_in_split(const DatasetManifest& m, Split split) {
  std::vector<DatasetItem> out;
  for (const auto& it : m.items)
    if (it.split == split) out.push_back(it);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s.classes = j.value("classes", s.classes);
    s.images = j.value("images", s.images);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.count_min = j.value("count_min", s.count_min);
    s.count_max = j.value("count_max", s.count_max);
    s.sparsity = j.value("sparsity", s.sparsity);
    s.blob_radius = j.value("blob_radius", s.blob_radius);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("synth config: ") + e.what());
  }
  return s;
}

namespace {

std::array<float, 3> class_colour(int c, int classes) {
  // Evenly spaced hues at full saturation.
  const double h = 6.0 * c / std::max(1, classes);
  const int sector = static_cast<int>(h) % 6;
  const float f = static_cast<float>(h - std::floor(h));
  switch (sector) {
    case 0: return {1.0f, f, 0.0f};
    case 1: return {1.0f - f, 1.0f, 0.0f};
    case 2: return {0.0f, 1.0f, f};
    case 3: return {0.0f, 1.0f - f, 1.0f};
    case 4: return {f, 0.0f, 1.0f};
    default: return {1.0f, 0.0f, 1.0f - f};
  }
}

}  // namespace

DatasetManifest synth_dataset(const SynthSpec& s) {
  if (s.classes < 1 || s.images < 0 || s.width <= 0 || s.height <= 0 || s.count_min < 0 || s.count_max < s.count_min ||
      s.blob_radius < 1 || s.sparsity < 0 || s.sparsity > 1 || 2 * s.blob_radius >= std::min(s.width, s.height))
    fail_validation("invalid synthetic dataset spec");
  DatasetManifest m;
  m.name = "synthetic";
  m.seed = s.seed;
  for (int c = 0; c < s.classes; ++c) m.categories.push_back("class" + std::to_string(c));
  std::mt19937_64 rng(s.seed);
  const int r = s.blob_radius;
  const int count_lo = std::max(1, s.count_min);
  const int count_hi = std::max(count_lo, s.count_max);
  for (int n = 0; n < s.images; ++n) {
    DatasetItem it;
    it.ann.image_id = "synth" + std::to_string(n);
    it.source_id = it.ann.image_id;
    it.ann.width = s.width;
    it.ann.height = s.height;
    Image img(s.width, s.height);
    const float base = 0.3f + 0.2f * static_cast<float>(detail::uniform01(rng));
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const float v = base + 0.08f * static_cast<float>(detail::uniform01(rng) - 0.5);
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = v;
      }
    std::vector<bool> present(s.classes, false);
    if (detail::uniform01(rng) < s.sparsity) {
      present[detail::uniform_int(rng, 0, s.classes - 1)] = true;
    } else {
      for (int c = 0; c < s.classes; ++c) present[c] = detail::uniform01(rng) < 0.5;
    }
    for (int c = 0; c < s.classes; ++c) {
      if (!present[c]) continue;
      const auto col = class_colour(c, s.classes);
      const auto count = detail::uniform_int(rng, count_lo, count_hi);
      for (std::int64_t k = 0; k < count; ++k) {
        const int cx = static_cast<int>(detail::uniform_int(rng, r, s.width - r - 1));
        const int cy = static_cast<int>(detail::uniform_int(rng, r, s.height - r - 1));
        for (int y = cy - r; y <= cy + r; ++y)
          for (int x = cx - r; x <= cx + r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
              for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = col[ch];
        it.ann.boxes.push_back({c, cx - r + 0.0, cy - r + 0.0, cx + r + 1.0, cy + r + 1.0});
      }
    }
    it.image = std::move(img);
    m.items.push_back(std::move(it));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Upstream adapters

DatasetManifest read_visdrone(const fs::path& images_dir, const fs::path& annotations_dir) {
  // Lines: bbox_left,bbox_top,bbox_width,bbox_height,score,category,truncation,occlusion
  // Category 0 (ignored regions) and 11 (others) are dropped; 1..10 -> 0..9.
  if (!fs::is_directory(annotations_dir)) fail_runtime("not a directory: " + annotations_dir.string());
  DatasetManifest m;
  m.name = "visdrone-det";
  m.categories = visdrone_categories(false);
  m.base_dir = images_dir;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(annotations_dir))
    if (e.path().extension() == ".txt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    DatasetItem it;
    it.ann.image_id = f.stem().string();
    it.source_id = it.ann.image_id;
    it.file = it.ann.image_id + ".jpg";
    const Image img = load_image(images_dir / it.file);
    it.ann.width = img.width;
    it.ann.height = img.height;
    std::ifstream in(f);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ls(line);
      double x, y, w, h, score;
      int cat;
      if (!(ls >> x >> y >> w >> h >> score >> cat))
        fail_validation(f.string() + ":" + std::to_string(lineno) + ": malformed VisDrone annotation");
      if (cat < 1 || cat > 10 || w <= 0 || h <= 0) continue;
      it.ann.boxes.push_back({cat - 1, x, y, x + w, y + h});
    }
    it.ann = validated(it.ann, m.num_classes());
    m.items.push_back(std::move(it));
  }
  return m;
}

DatasetManifest read_isaid(const fs::path& instances_json, const fs::path& images_dir,
                           const std::vector<std::string>& keep_categories) {
  // COCO-style instances: images[{id,file_name,width,height}],
  // annotations[{image_id,category_id,bbox:[x,y,w,h]}], categories[{id,name}].
  std::ifstream in(instances_json);
  if (!in) fail_runtime("cannot open " + instances_json.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail_validation(instances_json.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.name = "isaid";
  m.base_dir = images_dir;
  std::map<long long, int> cat_index;
  try {
    std::vector<std::pair<long long, std::string>> cats;
    for (const auto& c : j.at("categories")) cats.emplace_back(c.at("id").get<long long>(), c.at("name").get<std::string>());
    std::sort(cats.begin(), cats.end());
    if (keep_categories.empty()) {
      for (const auto& [id, name] : cats) {
        cat_index[id] = m.num_classes();
        m.categories.push_back(name);
      }
    } else {
      for (const auto& want : keep_categories) {
        auto it = std::find_if(cats.begin(), cats.end(), [&](const auto& c) { return c.second == want; });
        if (it == cats.end()) fail_validation("iSAID category '" + want + "' not present");
        cat_index[it->first] = m.num_classes();
        m.categories.push_back(want);
      }
    }
    std::map<long long, std::size_t> by_image;
    for (const auto& im : j.at("images")) {
      DatasetItem it;
      const long long id = im.at("id").get<long long>();
      it.ann.image_id = fs::path(im.at("file_name").get<std::string>()).stem().string();
      it.source_id = it.ann.image_id;
      it.file = im.at("file_name").get<std::string>();
      it.ann.width = im.at("width").get<int>();
      it.ann.height = im.at("height").get<int>();
      by_image[id] = m.items.size();
      m.items.push_back(std::move(it));
    }
    for (const auto& a : j.at("annotations")) {
      auto ci = cat_index.find(a.at("category_id").get<long long>());
      if (ci == cat_index.end()) continue;
      auto ii = by_image.find(a.at("image_id").get<long long>());
      if (ii == by_image.end()) fail_validation("annotation refers to unknown image id");
      const auto bb = a.at("bbox").get<std::vector<double>>();
      if (bb.size() != 4) fail_validation("iSAID bbox must have 4 numbers");
      if (bb[2] <= 0 || bb[3] <= 0) continue;
      m.items[ii->second].ann.boxes.push_back({ci->second, bb[0], bb[1], bb[0] + bb[2], bb[1] + bb[3]});
    }
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("iSAID instances: ") + e.what());
  }
  for (auto& it : m.items) it.ann = validated(it.ann, std::max(1, m.num_classes()));
  return m;
}

}  // namespace mcc
