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

// Per-prototype activation maps, trilinear upsampling and multi-level
// explanations (grandparent -> parent -> child) with PGM rendering.
//
// Upsampling uses the half-pixel convention: output index o on an axis of
// input length n and output length m samples the input at
//
//   src = (o + 0.5) * n / m - 0.5,   clamped to [0, n - 1]
//
// and the output cell o maps back to input cell floor((o + 0.5) * n / m).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperproto/binary_io.hpp"
#include "hyperproto/errors.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/protonet.hpp"
#include "hyperproto/tensorio.hpp"

namespace hyperproto {

struct MapDims {
  int w = 1, h = 1, t = 1;
  std::size_t count() const {
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(t);
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(h) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(w) + static_cast<std::size_t>(x);
  }
  std::array<int, 3> coords(std::size_t i) const {
    return {static_cast<int>(i % static_cast<std::size_t>(w)),
            static_cast<int>((i / static_cast<std::size_t>(w)) % static_cast<std::size_t>(h)),
            static_cast<int>(i / (static_cast<std::size_t>(w) * static_cast<std::size_t>(h)))};
  }
  friend bool operator==(const MapDims&, const MapDims&) = default;
};

/// Input coordinate sampled by output index `o`.
inline double source_coord(int o, int in, int out) {
  const double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(in - 1));
}

/// Input cell containing the centre of output cell `o`.
inline int source_cell(int o, int in, int out) {
  const auto c = static_cast<int>(std::floor((static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                                             static_cast<double>(out)));
  return std::clamp(c, 0, in - 1);
}

inline Vec upsample_trilinear(std::span<const double> in, const MapDims& from, const MapDims& to) {
  if (in.size() != from.count()) throw ArgumentError("upsample: map size does not match dims");
  if (to.w < 1 || to.h < 1 || to.t < 1) throw ArgumentError("upsample: output dims must be positive");
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [](int in_n, int out_n) {
    std::vector<Tap> v(static_cast<std::size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
      const double s = source_coord(o, in_n, out_n);
      const int i0 = static_cast<int>(std::floor(s));
      v[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in_n - 1), s - i0};
    }
    return v;
  };
  const auto tw = taps(from.w, to.w), th = taps(from.h, to.h), tt = taps(from.t, to.t);
  // a + f (b - a) keeps equal endpoints exact.
  auto lerp = [](double a, double b, double f) { return a + f * (b - a); };
  Vec out(to.count());
  for (int z = 0; z < to.t; ++z)
    for (int y = 0; y < to.h; ++y)
      for (int x = 0; x < to.w; ++x) {
        const Tap &a = tw[static_cast<std::size_t>(x)], &b = th[static_cast<std::size_t>(y)],
                  &c = tt[static_cast<std::size_t>(z)];
        auto v = [&](int xi, int yi, int zi) { return in[from.index(xi, yi, zi)]; };
        const double c00 = lerp(v(a.i0, b.i0, c.i0), v(a.i1, b.i0, c.i0), a.f);
        const double c10 = lerp(v(a.i0, b.i1, c.i0), v(a.i1, b.i1, c.i0), a.f);
        const double c01 = lerp(v(a.i0, b.i0, c.i1), v(a.i1, b.i0, c.i1), a.f);
        const double c11 = lerp(v(a.i0, b.i1, c.i1), v(a.i1, b.i1, c.i1), a.f);
        out[to.index(x, y, z)] = lerp(lerp(c00, c10, b.f), lerp(c01, c11, b.f), c.f);
      }
  return out;
}

inline std::size_t argmax_first(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct ActivationMap {
  int prototype = 0;
  int owner = 0;
  Level level = Level::child;
  MapDims raw_dims;
  Vec raw;  // similarity per patch position
  MapDims up_dims;
  Vec upsampled;
  std::array<int, 3> raw_argmax{};
  std::array<int, 3> up_argmax{};

  friend bool operator==(const ActivationMap&, const ActivationMap&) = default;
};

/// Builds the map from an already adapted grid.
inline ActivationMap activation_map_adapted(const FeatureGrid& adapted, const ModelState& model,
                                            const HierarchyTree& tree, int prototype, const MapDims& up) {
  if (prototype < 0 || static_cast<std::size_t>(prototype) >= model.num_prototypes())
    throw ArgumentError("activation_map: prototype " + std::to_string(prototype) + " out of range");
  ActivationMap m;
  m.prototype = prototype;
  m.owner = model.owners[static_cast<std::size_t>(prototype)];
  m.level = tree.level(m.owner);
  const PositionGrid pg = positions_for(adapted.dims(), model.config.proto);
  m.raw_dims = {pg.w, pg.h, pg.t};
  m.raw = patch_distances(adapted, model.prototype(static_cast<std::size_t>(prototype)), model.config.proto);
  for (double& d : m.raw) d = similarity(d, model.config.epsilon);
  m.up_dims = up;
  m.upsampled = upsample_trilinear(m.raw, m.raw_dims, up);
  m.raw_argmax = m.raw_dims.coords(argmax_first(m.raw));
  m.up_argmax = up.coords(argmax_first(m.upsampled));
  return m;
}

inline ActivationMap activation_map(const FeatureGrid& clip, const ModelState& model, const HierarchyTree& tree,
                                    int prototype, const MapDims& up) {
  return activation_map_adapted(adapt(clip, model.params.adapters), model, tree, prototype, up);
}

struct RankedPrototype {
  int prototype = 0;
  double score = 0.0;
  ActivationMap map;
  std::optional<Provenance> provenance;
  friend bool operator==(const RankedPrototype&, const RankedPrototype&) = default;
};

struct LevelExplanation {
  Level level = Level::child;
  int class_id = 0;
  std::string class_name;
  std::vector<RankedPrototype> top;
  friend bool operator==(const LevelExplanation&, const LevelExplanation&) = default;
};

struct Explanation {
  std::string clip_id;
  int predicted = 0;
  int predicted_parent = 0;
  int predicted_grandparent = 0;
  std::optional<int> truth;
  std::vector<LevelExplanation> levels;  // grandparent, parent, child
  std::vector<std::string> notices;
  friend bool operator==(const Explanation&, const Explanation&) = default;
};

struct ExplainOptions {
  int k = 1;
  int out_w = 32;
  int out_h = 32;
  int out_t = 0;  // 0: keep the raw temporal length
};

inline Explanation explain_clip(const ClipRecord& clip, const ModelState& model, const HierarchyTree& tree,
                                const ExplainOptions& opt = {}) {
  if (opt.k < 1) throw ArgumentError("explain_clip: k must be >= 1");
  const ForwardResult f = forward(clip.grid, model);
  const int pred = predicted_child(predict_probabilities(f, model), model, tree);
  const auto [parent, grand] = ancestors(tree, pred);

  Explanation ex;
  ex.clip_id = clip.clip_id;
  ex.predicted = pred;
  ex.predicted_parent = parent;
  ex.predicted_grandparent = grand;
  if (clip.label != 0) ex.truth = clip.label;

  const PositionGrid pg = positions_for(f.adapted.dims(), model.config.proto);
  const MapDims up{opt.out_w, opt.out_h, opt.out_t > 0 ? opt.out_t : pg.t};
  for (const int cls : {grand, parent, pred}) {
    std::vector<std::size_t> owned;
    for (std::size_t j = 0; j < model.num_prototypes(); ++j)
      if (model.owners[j] == cls) owned.push_back(j);
    if (owned.empty()) {
      ex.notices.push_back(std::string(to_string(tree.level(cls))) + " level omitted: class '" +
                           tree.node(cls).name + "' owns no prototypes");
      continue;
    }
    std::stable_sort(owned.begin(), owned.end(),
                     [&](std::size_t a, std::size_t b) { return f.similarities[a] > f.similarities[b]; });
    LevelExplanation lvl{tree.level(cls), cls, tree.node(cls).name, {}};
    const std::size_t k = std::min(owned.size(), static_cast<std::size_t>(opt.k));
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t j = owned[r];
      lvl.top.push_back({static_cast<int>(j), f.similarities[j],
                         activation_map_adapted(f.adapted, model, tree, static_cast<int>(j), up),
                         model.provenance[j]});
    }
    ex.levels.push_back(std::move(lvl));
  }
  return ex;
}

// JSON index -----------------------------------------------------------------

inline nlohmann::json to_json(const ActivationMap& m) {
  return {{"prototype", m.prototype},
          {"owner", m.owner},
          {"level", to_string(m.level)},
          {"raw_dims", {m.raw_dims.w, m.raw_dims.h, m.raw_dims.t}},
          {"raw", m.raw},
          {"up_dims", {m.up_dims.w, m.up_dims.h, m.up_dims.t}},
          {"upsampled", m.upsampled},
          {"raw_argmax", m.raw_argmax},
          {"up_argmax", m.up_argmax}};
}

inline nlohmann::json to_json(const Explanation& ex) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : ex.levels) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& r : l.top) {
      nlohmann::json j{{"prototype", r.prototype}, {"score", r.score}, {"map", to_json(r.map)}};
      if (r.provenance)
        j["provenance"] = {{"clip_id", r.provenance->clip_id},
                           {"position", {r.provenance->w, r.provenance->h, r.provenance->t}}};
      else
        j["provenance"] = nullptr;
      top.push_back(std::move(j));
    }
    levels.push_back({{"level", to_string(l.level)}, {"class_id", l.class_id}, {"class_name", l.class_name},
                      {"top", std::move(top)}});
  }
  nlohmann::json j{{"clip_id", ex.clip_id},
                   {"predicted", ex.predicted},
                   {"predicted_parent", ex.predicted_parent},
                   {"predicted_grandparent", ex.predicted_grandparent},
                   {"levels", std::move(levels)},
                   {"notices", ex.notices}};
  j["truth"] = ex.truth ? nlohmann::json(*ex.truth) : nlohmann::json(nullptr);
  return j;
}

inline Level parse_level(const std::string& s) {
  const auto l = level_from_string(s);
  if (!l) throw ParseError("explanation: unknown level '" + s + "'");
  return *l;
}

inline MapDims parse_dims(const nlohmann::json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

inline ActivationMap activation_map_from_json(const nlohmann::json& j) {
  ActivationMap m;
  m.prototype = j.at("prototype").get<int>();
  m.owner = j.at("owner").get<int>();
  m.level = parse_level(j.at("level").get<std::string>());
  m.raw_dims = parse_dims(j.at("raw_dims"));
  m.raw = j.at("raw").get<Vec>();
  m.up_dims = parse_dims(j.at("up_dims"));
  m.upsampled = j.at("upsampled").get<Vec>();
  m.raw_argmax = j.at("raw_argmax").get<std::array<int, 3>>();
  m.up_argmax = j.at("up_argmax").get<std::array<int, 3>>();
  return m;
}

inline Explanation explanation_from_json(const nlohmann::json& j) {
  try {
    Explanation ex;
    ex.clip_id = j.at("clip_id").get<std::string>();
    ex.predicted = j.at("predicted").get<int>();
    ex.predicted_parent = j.at("predicted_parent").get<int>();
    ex.predicted_grandparent = j.at("predicted_grandparent").get<int>();
    if (!j.at("truth").is_null()) ex.truth = j.at("truth").get<int>();
    ex.notices = j.at("notices").get<std::vector<std::string>>();
    for (const auto& lj : j.at("levels")) {
      LevelExplanation l;
      l.level = parse_level(lj.at("level").get<std::string>());
      l.class_id = lj.at("class_id").get<int>();
      l.class_name = lj.at("class_name").get<std::string>();
      for (const auto& rj : lj.at("top")) {
        RankedPrototype r;
        r.prototype = rj.at("prototype").get<int>();
        r.score = rj.at("score").get<double>();
        r.map = activation_map_from_json(rj.at("map"));
        if (!rj.at("provenance").is_null()) {
          const auto& p = rj.at("provenance");
          const auto pos = p.at("position").get<std::array<int, 3>>();
          r.provenance = Provenance{p.at("clip_id").get<std::string>(), pos[0], pos[1], pos[2]};
        }
        l.top.push_back(std::move(r));
      }
      ex.levels.push_back(std::move(l));
    }
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("explanation JSON: ") + e.what());
  }
}

// Rendering ------------------------------------------------------------------

struct GrayImage {
  int w = 0, h = 0;
  std::vector<std::uint8_t> pixels;  // row-major
  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

inline Bytes encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline GrayImage decode_pgm(const Bytes& b) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t.push_back(static_cast<char>(b[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError("not a binary PGM", 0);
  GrayImage img;
  try {
    img.w = std::stoi(token());
    img.h = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError("PGM maxval must be 255", pos);
  } catch (const std::logic_error&) {
    throw FormatError("malformed PGM header", pos);
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h);
  if (b.size() - pos != n) throw FormatError("PGM payload size mismatch", pos);
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.end());
  return img;
}

/// One image per upsampled time step, min-max scaled over the whole map.
/// A constant map renders black.
inline std::vector<GrayImage> heatmap_frames(const ActivationMap& m) {
  const auto [lo_it, hi_it] = std::minmax_element(m.upsampled.begin(), m.upsampled.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  std::vector<GrayImage> frames;
  for (int t = 0; t < m.up_dims.t; ++t) {
    GrayImage img{m.up_dims.w, m.up_dims.h, {}};
    img.pixels.reserve(static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h));
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        const double v = span > 0 ? (m.upsampled[m.up_dims.index(x, y, t)] - lo) / span : 0.0;
        img.pixels.push_back(static_cast<std::uint8_t>(std::lround(255.0 * v)));
      }
    frames.push_back(std::move(img));
  }
  return frames;
}

inline GrayImage blend(const GrayImage& frame, const GrayImage& heat, double alpha) {
  GrayImage out{frame.w, frame.h, std::vector<std::uint8_t>(frame.pixels.size())};
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = static_cast<std::uint8_t>(
        std::lround((1.0 - alpha) * frame.pixels[i] + alpha * heat.pixels[i]));
  return out;
}

/// Writes <dir>/<clip_id>/<level>/<rank>_<prototype>_<t>.pgm for every listed
/// prototype plus <dir>/<clip_id>/explanation.json. With frames, also writes
/// overlay_<rank>_<prototype>_<t>.pgm; frame i*F/T backs upsampled step i.
/// Returns the written paths in order.
inline std::vector<std::filesystem::path> render(const Explanation& ex, const std::filesystem::path& dir,
                                                 const std::vector<GrayImage>* frames = nullptr,
                                                 const std::string& config_hash = {}, double alpha = 0.5) {
  std::vector<std::filesystem::path> written;
  const auto root = dir / ex.clip_id;
  for (const auto& lvl : ex.levels) {
    const auto ldir = root / std::string(to_string(lvl.level));
    std::filesystem::create_directories(ldir);
    for (std::size_t r = 0; r < lvl.top.size(); ++r) {
      const auto& rp = lvl.top[r];
      const auto imgs = heatmap_frames(rp.map);
      if (frames) {
        if (frames->size() < imgs.size())
          throw ArgumentError("render: " + std::to_string(frames->size()) + " frames for a map with " +
                              std::to_string(imgs.size()) + " time steps");
        for (const auto& fr : *frames)
          if (fr.w != rp.map.up_dims.w || fr.h != rp.map.up_dims.h)
            throw ArgumentError("render: frame size does not match the upsampled map");
      }
      for (std::size_t t = 0; t < imgs.size(); ++t) {
        const std::string stem = std::to_string(r) + "_" + std::to_string(rp.prototype) + "_" + std::to_string(t);
        const auto p = ldir / (stem + ".pgm");
        write_file(p, encode_pgm(imgs[t]));
        written.push_back(p);
        if (frames) {
          const std::size_t fi = t * frames->size() / imgs.size();
          const auto op = ldir / ("overlay_" + stem + ".pgm");
          write_file(op, encode_pgm(blend((*frames)[fi], imgs[t], alpha)));
          written.push_back(op);
        }
      }
    }
  }
  std::filesystem::create_directories(root);
  nlohmann::json j = to_json(ex);
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  const auto jp = root / "explanation.json";
  write_text_file(jp, j.dump(1) + "\n");
  written.push_back(jp);
  return written;
}

}  // namespace hyperproto
