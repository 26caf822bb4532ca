// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk dataset format: a directory of PPM images plus one COCO-style
// annotation document (images / annotations / categories, bbox as [x,y,w,h],
// segmentation as uncompressed column-major RLE). Boxes live in corner
// format everywhere inside the pipeline; conversion happens here only.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpt/common.hpp"
#include "dpt/geometry.hpp"
#include "dpt/resize.hpp"

namespace dpt {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---- PPM (P6, 8-bit) ------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw Error("write_ppm: expected 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_ppm: cannot open " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = img.at(x, y, ch);
        const int q = static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        row[static_cast<std::size_t>(x) * 3 + ch] = static_cast<unsigned char>(q);
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw Error("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw IntegrityError("read_ppm: unsupported or corrupt header in " + path);
  in.get();  // single whitespace after maxval
  Image img(w, h, 3);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) throw IntegrityError("read_ppm: truncated pixel data in " + path);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.at(x, y, ch) = static_cast<float>(row[static_cast<std::size_t>(x) * 3 + ch]) / 255.0f;
  }
  return img;
}

// ---- uncompressed RLE (COCO layout: column-major, zeros first) -------------

inline std::vector<std::int64_t> rle_encode(const Mask& m) {
  std::vector<std::int64_t> counts;
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (int x = 0; x < m.w; ++x) {
    for (int y = 0; y < m.h; ++y) {
      const std::uint8_t v = m.at(x, y) ? 1 : 0;
      if (v == current) {
        ++run;
      } else {
        counts.push_back(run);
        current = v;
        run = 1;
      }
    }
  }
  counts.push_back(run);
  return counts;
}

inline Mask rle_decode(const std::vector<std::int64_t>& counts, int w, int h) {
  Mask m(w, h);
  std::int64_t pos = 0;
  std::uint8_t value = 0;
  for (const auto run : counts) {
    for (std::int64_t i = 0; i < run; ++i) {
      if (pos >= static_cast<std::int64_t>(w) * h)
        throw IntegrityError("rle_decode: counts overflow the mask size");
      const int x = static_cast<int>(pos / h);
      const int y = static_cast<int>(pos % h);
      m.at(x, y) = value;
      ++pos;
    }
    value = value ? 0 : 1;
  }
  if (pos != static_cast<std::int64_t>(w) * h)
    throw IntegrityError("rle_decode: counts do not cover the mask");
  return m;
}

// ---- dataset --------------------------------------------------------------

struct CocoCategory {
  int id = 0;
  std::string name;
};

struct Dataset {
  std::vector<ImageSample> samples;
  std::vector<CocoCategory> categories;
};

/// Serializes samples as a COCO-style annotation document. Deterministic for
/// a given input (ordered keys, stable ids).
inline ordered_json dataset_to_coco_json(const Dataset& ds) {
  ordered_json root;
  root["images"] = ordered_json::array();
  root["annotations"] = ordered_json::array();
  root["categories"] = ordered_json::array();
  for (const auto& cat : ds.categories) {
    root["categories"].push_back({{"id", cat.id}, {"name", cat.name}});
  }
  int ann_id = 1;
  for (const auto& s : ds.samples) {
    ordered_json im;
    im["id"] = s.image_id;
    im["file_name"] = std::to_string(s.image_id) + ".ppm";
    im["width"] = s.pixels.w;
    im["height"] = s.pixels.h;
    root["images"].push_back(im);
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const auto& b = s.boxes[i];
      ordered_json ann;
      ann["id"] = ann_id++;
      ann["image_id"] = s.image_id;
      ann["category_id"] = s.labels[i];
      ann["bbox"] = {b.x1, b.y1, b.width(), b.height()};
      if (!s.masks.empty()) {
        ann["area"] = static_cast<std::int64_t>(s.masks[i].count());
        ann["segmentation"] = {{"size", {s.masks[i].h, s.masks[i].w}},
                               {"counts", rle_encode(s.masks[i])}};
      } else {
        ann["area"] = b.area();
      }
      ann["iscrowd"] = 0;
      root["annotations"].push_back(ann);
    }
  }
  return root;
}

/// Writes images (PPM) and the annotation document under dir:
/// dir/images/<id>.ppm and dir/annotations.json.
inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  for (const auto& s : ds.samples) {
    write_ppm((fs::path(dir) / "images" / (std::to_string(s.image_id) + ".ppm")).string(),
              s.pixels);
  }
  std::ofstream out(fs::path(dir) / "annotations.json");
  if (!out) throw Error("write_dataset: cannot open annotation file in " + dir);
  out << dataset_to_coco_json(ds).dump(2) << "\n";
}

/// Loads a dataset written by write_dataset (or any COCO-style document with
/// PPM images and RLE segmentation).
inline Dataset load_dataset(const std::string& image_dir, const std::string& annotation_file) {
  namespace fs = std::filesystem;
  std::ifstream in(annotation_file);
  if (!in) throw Error("load_dataset: cannot open " + annotation_file);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IntegrityError("load_dataset: malformed annotation JSON: " + std::string(e.what()));
  }

  Dataset ds;
  for (const auto& cat : root.at("categories")) {
    ds.categories.push_back({cat.at("id").get<int>(), cat.at("name").get<std::string>()});
  }
  std::vector<std::pair<std::int64_t, std::string>> order;  // (image_id, file)
  for (const auto& im : root.at("images")) {
    order.push_back({im.at("id").get<std::int64_t>(), im.at("file_name").get<std::string>()});
  }
  for (const auto& [id, file] : order) {
    ImageSample s;
    s.image_id = id;
    s.pixels = read_ppm((fs::path(image_dir) / file).string());
    ds.samples.push_back(std::move(s));
  }
  auto sample_of = [&](std::int64_t id) -> ImageSample& {
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i].first == id) return ds.samples[i];
    throw IntegrityError("load_dataset: annotation references unknown image id " +
                         std::to_string(id));
  };
  for (const auto& ann : root.at("annotations")) {
    auto& s = sample_of(ann.at("image_id").get<std::int64_t>());
    const auto& bb = ann.at("bbox");
    const double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
    const double w = bb.at(2).get<double>(), h = bb.at(3).get<double>();
    s.boxes.push_back(Box{x, y, x + w, y + h});
    s.labels.push_back(ann.at("category_id").get<int>());
    if (ann.contains("segmentation")) {
      const auto& seg = ann.at("segmentation");
      const int mh = seg.at("size").at(0).get<int>();
      const int mw = seg.at("size").at(1).get<int>();
      s.masks.push_back(rle_decode(seg.at("counts").get<std::vector<std::int64_t>>(), mw, mh));
    }
  }
  for (auto& s : ds.samples) s.validate();
  return ds;
}

}  // namespace dpt
