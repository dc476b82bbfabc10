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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hyperproto/explain.hpp"
#include "test_util.hpp"

using namespace hyperproto;

namespace {

TemplateMatrix random_templates(int dim, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TemplateMatrix phi(dim, count);
  for (int id = 1; id <= count; ++id) {
    const Vec p = hptest::random_ball_point(rng, static_cast<std::size_t>(dim), 0.8);
    std::copy(p.begin(), p.end(), phi.column(id).begin());
  }
  return phi;
}

struct Toy {
  HierarchyTree tree = balanced_tree(1, 2, 2);
  DatasetManifest data;
  ModelState model;

  explicit Toy(int ancestor_prototypes = 1) {
    data = generate_synthetic(tree, 2, {4, 3, 2, 8}, 0.3, 4);
    ModelConfig cfg;
    cfg.in_channels = 8;
    cfg.channels = 6;
    cfg.child_prototypes = 2;
    cfg.ancestor_prototypes = ancestor_prototypes;
    cfg.proto = {2, 1, 1};
    model = init_model(tree, random_templates(4, tree.size(), 3), cfg, 8);
  }
};

Vec random_map(std::mt19937_64& rng, std::size_t n) { return hptest::random_vec(rng, n, 0.0, 9.0); }

// Distance from knot i to the nearest output sample centre on one axis.
double nearest_sample_offset(int i, int in, int out) {
  double best = INFINITY;
  for (int o = 0; o < out; ++o) best = std::min(best, std::abs(source_coord(o, in, out) - i));
  return best;
}

}  // namespace

TEST(Upsample, IdentityAndConstant) {
  std::mt19937_64 rng(1);
  const MapDims d{3, 4, 2};
  const Vec m = random_map(rng, d.count());
  EXPECT_EQ(upsample_trilinear(m, d, d), m);
  const Vec flat(d.count(), 2.5);
  for (double v : upsample_trilinear(flat, d, {17, 9, 5})) EXPECT_EQ(v, 2.5);
  EXPECT_THROW(upsample_trilinear(m, {3, 4, 1}, d), ArgumentError);
  EXPECT_THROW(upsample_trilinear(m, d, {0, 4, 2}), ArgumentError);
}

TEST(Upsample, HalfPixelCoordinates) {
  // 2 -> 4 samples at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
  const Vec in = {0.0, 4.0};
  const Vec out = upsample_trilinear(in, {2, 1, 1}, {4, 1, 1});
  EXPECT_EQ(out, (Vec{0.0, 1.0, 3.0, 4.0}));
  EXPECT_EQ(source_cell(0, 2, 4), 0);
  EXPECT_EQ(source_cell(1, 2, 4), 0);
  EXPECT_EQ(source_cell(2, 2, 4), 1);
  EXPECT_EQ(source_cell(3, 2, 4), 1);
}

TEST(Upsample, DominantPeakArgmaxMapsBackToRawCell) {
  // A sample outside the peak cell puts weight <= 1/2 on the peak knot, so it
  // is below (v* + v2) / 2. The nearest in-cell sample keeps weight
  // >= 1 - sum(offsets). The mapping is guaranteed when the second bound wins.
  std::mt19937_64 rng(2);
  const MapDims shapes[] = {{3, 3, 2}, {5, 4, 1}, {2, 2, 3}, {7, 7, 4}};
  const MapDims outs[] = {{32, 32, 2}, {15, 12, 1}, {6, 6, 3}, {112, 112, 16}, {9, 10, 4}};
  int checked = 0;
  for (const MapDims& from : shapes)
    for (const MapDims& to : outs) {
      if (to.w < from.w || to.h < from.h || to.t < from.t) continue;
      for (int rep = 0; rep < 20; ++rep) {
        Vec raw = hptest::random_vec(rng, from.count(), 0.0, 1.0);
        const std::size_t peak = std::uniform_int_distribution<std::size_t>(0, raw.size() - 1)(rng);
        raw[peak] = 10.0;
        const auto r = from.coords(peak);
        const double offsets = nearest_sample_offset(r[0], from.w, to.w) + nearest_sample_offset(r[1], from.h, to.h) +
                               nearest_sample_offset(r[2], from.t, to.t);
        Vec rest = raw;
        rest[peak] = 0.0;
        const double v2 = *std::max_element(rest.begin(), rest.end());
        const double lo = *std::min_element(raw.begin(), raw.end());
        if (10.0 - offsets * (10.0 - lo) <= 0.5 * (10.0 + v2)) continue;
        ++checked;
        const Vec up = upsample_trilinear(raw, from, to);
        const auto u = to.coords(argmax_first(up));
        EXPECT_EQ(source_cell(u[0], from.w, to.w), r[0]);
        EXPECT_EQ(source_cell(u[1], from.h, to.h), r[1]);
        EXPECT_EQ(source_cell(u[2], from.t, to.t), r[2]);
        EXPECT_LE(up[argmax_first(up)], 10.0);
      }
    }
  EXPECT_GT(checked, 200);
}

TEST(ActivationMapTest, ExactPatchPeaksAtLogInverseEpsilon) {
  Toy toy;
  const ClipRecord& clip = toy.data.clips[0];
  const FeatureGrid z = adapt(clip.grid, toy.model.params.adapters);
  // copy the 2x1x1 patch at (1, 2, 1) into prototype 0
  auto dst = toy.model.params.prototypes.begin();
  dst = std::copy(z.cell(1, 2, 1).begin(), z.cell(1, 2, 1).end(), dst);
  std::copy(z.cell(2, 2, 1).begin(), z.cell(2, 2, 1).end(), dst);
  const ActivationMap m = activation_map(clip.grid, toy.model, toy.tree, 0, {12, 9, 2});
  EXPECT_EQ(m.raw_dims, (MapDims{3, 3, 2}));
  EXPECT_EQ(m.raw_argmax, (std::array<int, 3>{1, 2, 1}));
  EXPECT_NEAR(*std::max_element(m.raw.begin(), m.raw.end()), std::log(1.0 / toy.model.config.epsilon), 1e-12);
  for (double v : m.raw) {
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, std::log(1.0 / toy.model.config.epsilon) + 1e-12);
  }
  EXPECT_EQ(source_cell(m.up_argmax[0], 3, 12), 1);
  EXPECT_EQ(source_cell(m.up_argmax[1], 3, 9), 2);
  EXPECT_EQ(m.up_argmax[2], 1);
  EXPECT_EQ(m.owner, toy.model.owners[0]);
  EXPECT_THROW(activation_map(clip.grid, toy.model, toy.tree, 99, {3, 3, 2}), ArgumentError);
}

TEST(ExplainClip, LevelsFollowThePredictedPath) {
  Toy toy;
  for (const auto& clip : toy.data.clips) {
    ExplainOptions opt;
    opt.k = 2;
    const Explanation ex = explain_clip(clip, toy.model, toy.tree, opt);
    ASSERT_EQ(ex.levels.size(), 3u);
    EXPECT_EQ(ex.levels[0].level, Level::grandparent);
    EXPECT_EQ(ex.levels[1].level, Level::parent);
    EXPECT_EQ(ex.levels[2].level, Level::child);
    EXPECT_EQ(ex.levels[2].class_id, ex.predicted);
    EXPECT_EQ(ex.levels[1].class_id, toy.tree.parent_of(ex.predicted));
    EXPECT_EQ(ex.levels[0].class_id, ex.predicted_grandparent);
    EXPECT_EQ(ex.truth, clip.label);
    EXPECT_TRUE(ex.notices.empty());
    for (const auto& l : ex.levels) {
      EXPECT_EQ(l.top.size(), l.level == Level::child ? 2u : 1u);
      for (std::size_t r = 0; r < l.top.size(); ++r) {
        EXPECT_EQ(toy.model.owners[static_cast<std::size_t>(l.top[r].prototype)], l.class_id);
        EXPECT_EQ(l.top[r].map.prototype, l.top[r].prototype);
        EXPECT_NEAR(l.top[r].score, *std::max_element(l.top[r].map.raw.begin(), l.top[r].map.raw.end()), 1e-12);
        if (r > 0) {
          EXPECT_GE(l.top[r - 1].score, l.top[r].score);
        }
      }
    }
  }
  EXPECT_THROW(explain_clip(toy.data.clips[0], toy.model, toy.tree, {0, 8, 8, 0}), ArgumentError);
}

TEST(ExplainClip, BaseVariantHasOnlyTheChildLevel) {
  Toy toy(0);
  const Explanation ex = explain_clip(toy.data.clips[0], toy.model, toy.tree);
  ASSERT_EQ(ex.levels.size(), 1u);
  EXPECT_EQ(ex.levels[0].level, Level::child);
  ASSERT_EQ(ex.notices.size(), 2u);
  EXPECT_NE(ex.notices[0].find("grandparent"), std::string::npos);
}

TEST(ExplainClip, JsonRoundTrip) {
  Toy toy;
  toy.model.provenance[1] = Provenance{"clip_x", 2, 0, 1};
  for (const auto& clip : toy.data.clips) {
    ExplainOptions opt;
    opt.k = 2;
    const Explanation ex = explain_clip(clip, toy.model, toy.tree, opt);
    const nlohmann::json j = to_json(ex);
    EXPECT_EQ(explanation_from_json(nlohmann::json::parse(j.dump())), ex);
  }
  EXPECT_THROW(explanation_from_json(nlohmann::json::object()), ParseError);
}

TEST(Render, FilesPeakAndDeterminism) {
  Toy toy;
  ExplainOptions opt;
  opt.k = 1;
  opt.out_w = 12;
  opt.out_h = 9;
  const Explanation ex = explain_clip(toy.data.clips[0], toy.model, toy.tree, opt);
  const auto a = hptest::temp_dir("render_a"), b = hptest::temp_dir("render_b");
  const auto pa = render(ex, a, nullptr, "abc");
  const auto pb = render(ex, b, nullptr, "abc");
  // 3 levels x 1 prototype x 2 time steps, plus the index
  ASSERT_EQ(pa.size(), 7u);
  ASSERT_EQ(pb.size(), pa.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(std::filesystem::relative(pa[i], a), std::filesystem::relative(pb[i], b));
    EXPECT_EQ(read_file(pa[i]), read_file(pb[i]));
  }
  EXPECT_EQ(pa.back().filename(), "explanation.json");
  const auto index = nlohmann::json::parse(read_text_file(pa.back()));
  EXPECT_EQ(index["config_hash"], "abc");

  // the peak of the upsampled map is the brightest pixel of its frame
  const RankedPrototype& rp = ex.levels[2].top[0];
  const auto frame_path = a / ex.clip_id / "child" /
                          ("0_" + std::to_string(rp.prototype) + "_" + std::to_string(rp.map.up_argmax[2]) + ".pgm");
  const GrayImage img = decode_pgm(read_file(frame_path));
  EXPECT_EQ(img.w, 12);
  EXPECT_EQ(img.h, 9);
  EXPECT_EQ(img.pixels[static_cast<std::size_t>(rp.map.up_argmax[1] * 12 + rp.map.up_argmax[0])], 255);
}

TEST(Render, OverlaysNeedEnoughFrames) {
  Toy toy;
  ExplainOptions opt;
  opt.out_w = 6;
  opt.out_h = 5;
  const Explanation ex = explain_clip(toy.data.clips[1], toy.model, toy.tree, opt);
  const std::vector<GrayImage> one{GrayImage{6, 5, std::vector<std::uint8_t>(30, 100)}};
  EXPECT_THROW(render(ex, hptest::temp_dir("render_short"), &one), ArgumentError);
  const std::vector<GrayImage> wrong(4, GrayImage{5, 5, std::vector<std::uint8_t>(25, 0)});
  EXPECT_THROW(render(ex, hptest::temp_dir("render_wrong"), &wrong), ArgumentError);

  const std::vector<GrayImage> four(4, GrayImage{6, 5, std::vector<std::uint8_t>(30, 100)});
  const auto paths = render(ex, hptest::temp_dir("render_overlay"), &four);
  EXPECT_EQ(paths.size(), 13u);
  int overlays = 0;
  for (const auto& p : paths) overlays += p.filename().string().rfind("overlay_", 0) == 0;
  EXPECT_EQ(overlays, 6);
}

TEST(Pgm, RoundTripAndErrors) {
  const GrayImage img{3, 2, {0, 10, 20, 30, 40, 255}};
  const Bytes b = encode_pgm(img);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 11), "P5\n3 2\n255\n");
  EXPECT_EQ(decode_pgm(b), img);
  Bytes cut(b.begin(), b.end() - 1);
  EXPECT_THROW(decode_pgm(cut), FormatError);
  Bytes p2 = b;
  p2[1] = '2';
  EXPECT_THROW(decode_pgm(p2), FormatError);
}
