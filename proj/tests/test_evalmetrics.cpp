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
#include <random>
#include <set>
#include <string>

#include "hyperproto/binary_io.hpp"
#include "hyperproto/evalmetrics.hpp"

using namespace hyperproto;

namespace {

HierarchyTree ucf() {
  return HierarchyTree::parse(read_text_file(std::string(HP_SOURCE_DIR) + "/data/hierarchies/ucf101.json"));
}

// Hops between two leaves by walking up the tree.
int walk_hops(const HierarchyTree& t, int a, int b) {
  if (a == b) return 0;
  if (t.parent_of(a) == t.parent_of(b)) return 2;
  if (t.parent_of(t.parent_of(a)) == t.parent_of(t.parent_of(b))) return 4;
  return 6;
}

Prediction pred(std::string clip, std::string video, int truth, int predicted) {
  return {std::move(clip), std::move(video), truth, predicted, {}};
}

PredictionSet random_predictions(const HierarchyTree& t, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cls(1, t.num_children());
  std::uniform_int_distribution<int> vid(0, 199);
  PredictionSet out;
  for (std::size_t i = 0; i < n; ++i) {
    const int truth = cls(rng);
    // bias toward near misses so every hop band is populated
    int p = cls(rng);
    if (i % 3 == 0) p = truth;
    if (i % 5 == 1) {
      const auto& sib = t.children_of(t.parent_of(truth));
      p = sib[i % sib.size()];
    }
    out.push_back(pred("c" + std::to_string(i), "v" + std::to_string(truth) + "_" + std::to_string(vid(rng)), truth, p));
  }
  return out;
}

}  // namespace

TEST(HopAccuracy, MatchesWalkOracleExactly) {
  const auto t = ucf();
  const PredictionSet preds = random_predictions(t, 1000, 3);
  for (int hops : {0, 2, 4}) {
    std::size_t hits = 0;
    for (const auto& p : preds) hits += walk_hops(t, p.truth, p.predicted) <= hops;
    EXPECT_EQ(hop_accuracy(preds, t, hops), static_cast<double>(hits) / 1000.0) << hops;
  }
}

TEST(HopAccuracy, Examples) {
  const auto t = balanced_tree(2, 2, 2);
  // children 1,2 share a parent; 3,4 are cousins of them; 5..8 sit under the other grandparent
  const PredictionSet exact = {pred("a", "a", 1, 1), pred("b", "b", 6, 6)};
  for (int h : {0, 2, 4}) EXPECT_EQ(hop_accuracy(exact, t, h), 1.0);
  const PredictionSet sib = {pred("a", "a", 1, 2)};
  EXPECT_EQ(hop_accuracy(sib, t, 0), 0.0);
  EXPECT_EQ(hop_accuracy(sib, t, 2), 1.0);
  EXPECT_EQ(hop_accuracy(sib, t, 4), 1.0);
  const PredictionSet cousin = {pred("a", "a", 1, 3)};
  EXPECT_EQ(hop_accuracy(cousin, t, 2), 0.0);
  EXPECT_EQ(hop_accuracy(cousin, t, 4), 1.0);
  const PredictionSet far = {pred("a", "a", 1, 7)};
  for (int h : {0, 2, 4}) EXPECT_EQ(hop_accuracy(far, t, h), 0.0);

  EXPECT_THROW(hop_accuracy({}, t, 0), ArgumentError);
  EXPECT_THROW(hop_accuracy(exact, t, 1), ArgumentError);
  EXPECT_THROW(hop_accuracy(exact, t, 6), ArgumentError);
}

TEST(HopAccuracy, NestedAndPermutationInvariant) {
  const auto t = ucf();
  for (std::uint64_t s = 0; s < 5; ++s) {
    PredictionSet preds = random_predictions(t, 300, s);
    const LevelAccuracy a = level_accuracy(preds, t);
    EXPECT_LE(a.class_acc, a.sibling);
    EXPECT_LE(a.sibling, a.cousin);
    std::mt19937_64 rng(s);
    std::shuffle(preds.begin(), preds.end(), rng);
    EXPECT_EQ(level_accuracy(preds, t), a);
    EXPECT_EQ(full_report(preds, t).video, full_report(random_predictions(t, 300, s), t).video);
  }
}

TEST(HopAccuracy, ChanceLevelIsOneOverK) {
  const auto t = ucf();
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> cls(1, 101);
  PredictionSet preds;
  for (int i = 0; i < 20000; ++i) preds.push_back(pred(std::to_string(i), std::to_string(i), cls(rng), cls(rng)));
  EXPECT_NEAR(hop_accuracy(preds, t, 0), 1.0 / 101.0, 0.003);
}

TEST(VideoVote, MajorityTiesAndSingles) {
  const PredictionSet preds = {pred("1", "x", 4, 7), pred("2", "x", 4, 7), pred("3", "x", 4, 2),
                               pred("4", "y", 3, 9), pred("5", "y", 3, 5),
                               pred("6", "z", 1, 8)};
  const PredictionSet v = video_vote(preds);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].video_id, "x");
  EXPECT_EQ(v[0].predicted, 7);
  EXPECT_EQ(v[0].truth, 4);
  EXPECT_EQ(v[1].predicted, 5);  // tie goes to the lower id
  EXPECT_EQ(v[2].predicted, 8);
}

TEST(VideoVote, OneRowPerVideoAndMeanProbabilities) {
  const auto t = ucf();
  const PredictionSet preds = random_predictions(t, 1000, 4);
  std::set<std::string> vids;
  for (const auto& p : preds) vids.insert(p.video_id);
  EXPECT_EQ(video_vote(preds).size(), vids.size());

  PredictionSet two = {pred("a", "v", 1, 1), pred("b", "v", 1, 2)};
  two[0].probabilities = {0.8, 0.2};
  two[1].probabilities = {0.4, 0.6};
  const Prediction v = video_vote(two).at(0);
  ASSERT_EQ(v.probabilities.size(), 2u);
  EXPECT_DOUBLE_EQ(v.probabilities[0], 0.6);
  EXPECT_DOUBLE_EQ(v.probabilities[1], 0.4);

  const PredictionSet mixed = {pred("a", "v", 1, 1), pred("b", "v", 2, 2)};
  EXPECT_THROW(video_vote(mixed), ArgumentError);
}

TEST(Report, JsonAndCsv) {
  const auto t = balanced_tree(2, 2, 2);
  const PredictionSet preds = {pred("1", "x", 1, 1), pred("2", "x", 1, 2), pred("3", "x", 1, 1),
                               pred("4", "y", 5, 1)};
  const MetricsReport r = full_report(preds, t);
  EXPECT_EQ(r.num_clips, 4u);
  EXPECT_EQ(r.num_videos, 2u);
  EXPECT_EQ(r.clip.class_acc, 0.5);
  EXPECT_EQ(r.clip.sibling, 0.75);
  EXPECT_EQ(r.video.class_acc, 0.5);
  EXPECT_EQ((r.confusion.at({1, 1})), 2);
  EXPECT_EQ((r.confusion.at({5, 1})), 1);

  const nlohmann::json j = report_to_json(r, t);
  EXPECT_EQ(j["clip"]["accuracy"], 0.5);
  EXPECT_EQ(j["video"]["cousin_accuracy"], 0.5);
  EXPECT_EQ(j["confusion"].size(), 3u);
  EXPECT_EQ(j["confusion"][0]["truth_name"], t.node(1).name);

  EXPECT_EQ(report_to_csv(r),
            "level,accuracy,sibling_accuracy,cousin_accuracy\n"
            "clip,50.00,75.00,75.00\n"
            "video,50.00,50.00,50.00\n");
}
