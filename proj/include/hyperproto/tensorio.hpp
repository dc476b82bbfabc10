/* Copyright 2026 The hyperproto Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */

#pragma once

// Feature grids, dataset manifests and the synthetic hierarchical dataset.
//
// Grid memory order: channel fastest, then W, then H, then T:
//   index(w, h, t, c) = ((t * H + h) * W + w) * D + c
//
// "HPFG" file, little-endian:
//   "HPFG" | u32 version | u32 W | u32 H | u32 T | u32 D | W*H*T*D x f64

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperproto/binary_io.hpp"
#include "hyperproto/errors.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/rng.hpp"
#include "hyperproto/vecops.hpp"

namespace hyperproto {

struct GridDims {
  int w = 1, h = 1, t = 1, d = 1;

  std::size_t cells() const {
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(t);
  }
  std::size_t size() const { return cells() * static_cast<std::size_t>(d); }
  bool positive() const { return w > 0 && h > 0 && t > 0 && d > 0; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

class FeatureGrid {
 public:
  FeatureGrid() = default;
  explicit FeatureGrid(GridDims dims) : dims_(dims), data_(dims.size(), 0.0) {
    if (!dims.positive()) throw ArgumentError("FeatureGrid: dims must be positive");
  }
  FeatureGrid(GridDims dims, Vec data) : dims_(dims), data_(std::move(data)) {
    if (!dims.positive()) throw ArgumentError("FeatureGrid: dims must be positive");
    if (data_.size() != dims.size()) throw ArgumentError("FeatureGrid: data length does not match dims");
  }

  const GridDims& dims() const { return dims_; }

  std::size_t cell_index(int w, int h, int t) const {
    return (static_cast<std::size_t>(t) * static_cast<std::size_t>(dims_.h) + static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(dims_.w) + static_cast<std::size_t>(w);
  }
  /// Channel vector of one cell.
  std::span<double> cell(int w, int h, int t) {
    return {data_.data() + cell_index(w, h, t) * static_cast<std::size_t>(dims_.d), static_cast<std::size_t>(dims_.d)};
  }
  std::span<const double> cell(int w, int h, int t) const {
    return {data_.data() + cell_index(w, h, t) * static_cast<std::size_t>(dims_.d), static_cast<std::size_t>(dims_.d)};
  }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  GridDims dims_;
  Vec data_;
};

inline constexpr std::uint32_t kGridVersion = 1;

inline Bytes write_grid(const FeatureGrid& g) {
  ByteWriter w;
  w.magic("HPFG");
  w.u32(kGridVersion);
  w.u32(static_cast<std::uint32_t>(g.dims().w));
  w.u32(static_cast<std::uint32_t>(g.dims().h));
  w.u32(static_cast<std::uint32_t>(g.dims().t));
  w.u32(static_cast<std::uint32_t>(g.dims().d));
  w.f64s(g.data());
  return std::move(w).bytes();
}

inline FeatureGrid read_grid(const Bytes& bytes) {
  ByteReader r(bytes);
  r.expect_magic("HPFG");
  const std::size_t at_version = r.offset();
  if (r.u32() != kGridVersion) throw FormatError("unsupported grid version", at_version);
  const std::size_t at_dims = r.offset();
  GridDims dims;
  dims.w = static_cast<int>(r.u32());
  dims.h = static_cast<int>(r.u32());
  dims.t = static_cast<int>(r.u32());
  dims.d = static_cast<int>(r.u32());
  if (!dims.positive()) throw FormatError("grid dims must be positive", at_dims);
  const std::size_t payload = dims.size() * 8;
  if (r.remaining() != payload)
    throw FormatError("payload size mismatch: expected " + std::to_string(payload) + " bytes, found " +
                          std::to_string(r.remaining()),
                      r.offset());
  Vec data(dims.size());
  for (double& x : data) {
    const std::size_t at = r.offset();
    x = r.f64();
    if (!std::isfinite(x)) throw FormatError("non-finite grid entry", at);
  }
  return FeatureGrid(dims, std::move(data));
}

/// Axis-aligned sub-block of grid cells.
struct Block {
  int w = 0, h = 0, t = 0;     // origin
  int sw = 1, sh = 1, st = 1;  // extent

  bool contains(int cw, int ch, int ct) const {
    return cw >= w && cw < w + sw && ch >= h && ch < h + sh && ct >= t && ct < t + st;
  }
  friend bool operator==(const Block&, const Block&) = default;
};

struct ClipRecord {
  std::string clip_id;
  std::string video_id;
  int label = 0;          // child class id
  std::string grid_path;  // relative to the manifest directory
  FeatureGrid grid;
  std::optional<Block> signal;  // where the synthetic generator planted the class signal
};

struct DatasetManifest {
  std::string split;
  std::string hierarchy;  // path as written in the manifest
  GridDims dims;
  std::vector<ClipRecord> clips;
};

struct SynthOptions {
  double grandparent_scale = 1.0;
  double parent_scale = 0.7;
  double child_scale = 0.5;
  int clips_per_video = 4;
  /// Background cells draw noise with std background_gain * noise_sigma.
  double background_gain = 10.0;
  /// Signal block extent; 0 means ceil(dim / 2) on that axis.
  int block_w = 0, block_h = 0, block_t = 0;
};

/// Per-child class means built as grandparent mean + parent offset + child
/// offset. Index k holds child id k + 1.
inline std::vector<Vec> synthetic_class_means(const HierarchyTree& tree, int channels, std::uint64_t seed,
                                              const SynthOptions& opt = {}) {
  Rng rng(derive_seed(seed, 0x6d65616e));
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<Vec> offset(static_cast<std::size_t>(tree.size() + 1));
  for (const auto& n : tree.nodes()) {
    const double s = n.level == Level::grandparent ? opt.grandparent_scale
                     : n.level == Level::parent    ? opt.parent_scale
                                                   : opt.child_scale;
    Vec v(static_cast<std::size_t>(channels));
    for (double& x : v) x = s * unit(rng);
    offset[static_cast<std::size_t>(n.id)] = std::move(v);
  }
  std::vector<Vec> means;
  for (int c = 1; c <= tree.num_children(); ++c) {
    const auto [p, g] = ancestors(tree, c);
    Vec m = offset[static_cast<std::size_t>(g)];
    axpy(1.0, offset[static_cast<std::size_t>(p)], m);
    axpy(1.0, offset[static_cast<std::size_t>(c)], m);
    means.push_back(std::move(m));
  }
  return means;
}

/// Synthetic stand-in for backbone features. Every clip is background
/// noise N(0, (background_gain * sigma)^2) except one random contiguous
/// block whose cells carry class mean + N(0, sigma^2). Class means depend only on `seed`; clip content
/// depends on (seed, split), so train/test splits share their classes.
inline DatasetManifest generate_synthetic(const HierarchyTree& tree, int clips_per_class, GridDims dims,
                                          double noise_sigma, std::uint64_t seed,
                                          const std::string& split = "train", const SynthOptions& opt = {}) {
  if (clips_per_class < 1) throw ArgumentError("generate_synthetic: clips_per_class must be >= 1");
  if (!dims.positive()) throw ArgumentError("generate_synthetic: dims must be positive");
  if (!(noise_sigma >= 0)) throw ArgumentError("generate_synthetic: noise_sigma must be >= 0");
  if (opt.clips_per_video < 1) throw ArgumentError("generate_synthetic: clips_per_video must be >= 1");
  if (!(opt.background_gain >= 0)) throw ArgumentError("generate_synthetic: background_gain must be >= 0");

  const auto means = synthetic_class_means(tree, dims.d, seed, opt);
  const int bw = opt.block_w > 0 ? std::min(opt.block_w, dims.w) : (dims.w + 1) / 2;
  const int bh = opt.block_h > 0 ? std::min(opt.block_h, dims.h) : (dims.h + 1) / 2;
  const int bt = opt.block_t > 0 ? std::min(opt.block_t, dims.t) : (dims.t + 1) / 2;

  Rng rng(derive_seed(seed, fnv1a64(split)));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> ow(0, dims.w - bw), oh(0, dims.h - bh), ot(0, dims.t - bt);

  DatasetManifest m;
  m.split = split;
  m.dims = dims;
  char buf[64];
  for (int c = 1; c <= tree.num_children(); ++c) {
    const Vec& mean = means[static_cast<std::size_t>(c - 1)];
    for (int k = 0; k < clips_per_class; ++k) {
      ClipRecord rec;
      std::snprintf(buf, sizeof buf, "%s_c%03d_%03d", split.c_str(), c, k);
      rec.clip_id = buf;
      std::snprintf(buf, sizeof buf, "%s_c%03d_v%03d", split.c_str(), c, k / opt.clips_per_video);
      rec.video_id = buf;
      rec.label = c;
      rec.grid_path = "grids/" + rec.clip_id + ".hpfg";
      Block blk{ow(rng), oh(rng), ot(rng), bw, bh, bt};
      rec.signal = blk;
      rec.grid = FeatureGrid(dims);
      for (int t = 0; t < dims.t; ++t)
        for (int h = 0; h < dims.h; ++h)
          for (int w = 0; w < dims.w; ++w) {
            auto cell = rec.grid.cell(w, h, t);
            const bool signal = blk.contains(w, h, t);
            for (int ch = 0; ch < dims.d; ++ch)
              cell[static_cast<std::size_t>(ch)] =
                  signal ? mean[static_cast<std::size_t>(ch)] + noise_sigma * noise(rng)
                         : opt.background_gain * noise_sigma * noise(rng);
          }
      m.clips.push_back(std::move(rec));
    }
  }
  return m;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json clips = nlohmann::json::array();
  for (const auto& c : m.clips) {
    nlohmann::json j{{"clip_id", c.clip_id}, {"video_id", c.video_id}, {"label", c.label}, {"grid_path", c.grid_path}};
    if (c.signal) {
      j["signal"] = {{"origin", {c.signal->w, c.signal->h, c.signal->t}},
                     {"size", {c.signal->sw, c.signal->sh, c.signal->st}}};
    }
    clips.push_back(std::move(j));
  }
  return {{"split", m.split},
          {"hierarchy", m.hierarchy},
          {"dims", {m.dims.w, m.dims.h, m.dims.t, m.dims.d}},
          {"clips", std::move(clips)}};
}

/// Writes every grid under `dir` plus the manifest JSON at `dir / manifest_name`.
inline std::filesystem::path write_dataset(const DatasetManifest& m, const std::filesystem::path& dir,
                                           const std::string& manifest_name) {
  std::filesystem::create_directories(dir);
  for (const auto& c : m.clips) {
    const auto p = dir / c.grid_path;
    std::filesystem::create_directories(p.parent_path());
    write_file(p, write_grid(c.grid));
  }
  const auto path = dir / manifest_name;
  write_text_file(path, manifest_to_json(m).dump(1) + "\n");
  return path;
}

/// Directory the manifest's relative paths resolve against.
inline std::filesystem::path manifest_base(const std::filesystem::path& manifest_path) {
  return manifest_path.has_parent_path() ? manifest_path.parent_path() : std::filesystem::path(".");
}

inline std::filesystem::path resolve_hierarchy_path(const std::filesystem::path& manifest_path,
                                                    const DatasetManifest& m) {
  std::filesystem::path h(m.hierarchy);
  return h.is_absolute() ? h : manifest_base(manifest_path) / h;
}

/// Loads a manifest and every grid it references, validating dims and
/// labels against `tree`.
inline DatasetManifest load_manifest(const std::filesystem::path& path, const HierarchyTree& tree) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  try {
    m.split = j.at("split").get<std::string>();
    m.hierarchy = j.at("hierarchy").get<std::string>();
    const auto d = j.at("dims").get<std::vector<int>>();
    if (d.size() != 4) throw LoadError("manifest dims must have 4 entries");
    m.dims = {d[0], d[1], d[2], d[3]};
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + path.string() + ": " + e.what());
  }
  if (!m.dims.positive()) throw LoadError("manifest dims must be positive");

  const auto base = manifest_base(path);
  for (const auto& jc : j.at("clips")) {
    ClipRecord c;
    try {
      c.clip_id = jc.at("clip_id").get<std::string>();
      c.video_id = jc.at("video_id").get<std::string>();
      c.label = jc.at("label").get<int>();
      c.grid_path = jc.at("grid_path").get<std::string>();
      if (jc.contains("signal")) {
        const auto o = jc["signal"].at("origin").get<std::vector<int>>();
        const auto s = jc["signal"].at("size").get<std::vector<int>>();
        if (o.size() == 3 && s.size() == 3) c.signal = Block{o[0], o[1], o[2], s[0], s[1], s[2]};
      }
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("manifest clip record malformed: " + std::string(e.what()));
    }
    if (!tree.contains(c.label) || tree.level(c.label) != Level::child)
      throw LoadError("clip " + c.clip_id + ": label " + std::to_string(c.label) + " is not a child class");
    const auto gp = base / c.grid_path;
    if (!std::filesystem::exists(gp)) throw LoadError("clip " + c.clip_id + ": grid file " + gp.string() + " missing");
    try {
      c.grid = read_grid(read_file(gp));
    } catch (const FormatError& e) {
      throw LoadError("clip " + c.clip_id + ": " + e.what());
    }
    if (!(c.grid.dims() == m.dims)) throw LoadError("clip " + c.clip_id + ": grid dims differ from manifest dims");
    m.clips.push_back(std::move(c));
  }
  return m;
}

/// Loads the hierarchy a manifest points at, then the manifest itself.
inline std::pair<DatasetManifest, HierarchyTree> load_dataset(const std::filesystem::path& manifest_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest stub;
  stub.hierarchy = j.value("hierarchy", std::string{});
  HierarchyTree tree = HierarchyTree::parse(read_text_file(resolve_hierarchy_path(manifest_path, stub)));
  return {load_manifest(manifest_path, tree), std::move(tree)};
}

}  // namespace hyperproto
