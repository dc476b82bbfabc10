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

// Clip- and video-level accuracy, with sibling (<= 2 hops) and cousin
// (<= 4 hops) relaxations over the class tree.

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hyperproto/errors.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/vecops.hpp"

namespace hyperproto {

struct Prediction {
  std::string clip_id;
  std::string video_id;
  int truth = 0;
  int predicted = 0;
  Vec probabilities;  // over the model's head classes, may be empty

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

using PredictionSet = std::vector<Prediction>;

inline constexpr int kClassHops = 0;
inline constexpr int kSiblingHops = 2;
inline constexpr int kCousinHops = 4;

/// Fraction of predictions within `max_hops` of their true class.
inline double hop_accuracy(const PredictionSet& preds, const HierarchyTree& tree, int max_hops) {
  if (max_hops != kClassHops && max_hops != kSiblingHops && max_hops != kCousinHops)
    throw ArgumentError("hop_accuracy: max_hops must be 0, 2 or 4");
  if (preds.empty()) throw ArgumentError("hop_accuracy: empty prediction set");
  std::size_t hits = 0;
  for (const auto& p : preds)
    if (hop_distance(tree, p.truth, p.predicted) <= max_hops) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// One row per video (ordered by video_id): the modal clip prediction, ties
/// to the lowest class id. Probabilities are the clip mean.
inline PredictionSet video_vote(const PredictionSet& preds) {
  std::map<std::string, std::vector<const Prediction*>> by_video;
  for (const auto& p : preds) by_video[p.video_id].push_back(&p);
  PredictionSet out;
  out.reserve(by_video.size());
  for (const auto& [vid, clips] : by_video) {
    std::map<int, int> votes;
    for (const Prediction* c : clips) ++votes[c->predicted];
    int best = 0, best_n = 0;
    for (const auto& [cls, n] : votes)  // ascending class id, so strict > keeps the lowest on ties
      if (n > best_n) {
        best = cls;
        best_n = n;
      }
    const int truth = clips.front()->truth;
    for (const Prediction* c : clips)
      if (c->truth != truth) throw ArgumentError("video_vote: video " + vid + " has clips with different labels");
    Vec mean;
    if (std::all_of(clips.begin(), clips.end(),
                    [&](const Prediction* c) { return c->probabilities.size() == clips.front()->probabilities.size(); })) {
      mean.assign(clips.front()->probabilities.size(), 0.0);
      for (const Prediction* c : clips) axpy(1.0 / static_cast<double>(clips.size()), c->probabilities, mean);
    }
    out.push_back({vid, vid, truth, best, std::move(mean)});
  }
  return out;
}

struct LevelAccuracy {
  double class_acc = 0.0;
  double sibling = 0.0;
  double cousin = 0.0;
  friend bool operator==(const LevelAccuracy&, const LevelAccuracy&) = default;
};

struct MetricsReport {
  LevelAccuracy clip;
  LevelAccuracy video;
  std::size_t num_clips = 0;
  std::size_t num_videos = 0;
  std::map<std::pair<int, int>, int> confusion;  // (truth, predicted) -> clip count

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline LevelAccuracy level_accuracy(const PredictionSet& preds, const HierarchyTree& tree) {
  return {hop_accuracy(preds, tree, kClassHops), hop_accuracy(preds, tree, kSiblingHops),
          hop_accuracy(preds, tree, kCousinHops)};
}

inline MetricsReport full_report(const PredictionSet& preds, const HierarchyTree& tree) {
  MetricsReport r;
  r.clip = level_accuracy(preds, tree);
  const PredictionSet videos = video_vote(preds);
  r.video = level_accuracy(videos, tree);
  r.num_clips = preds.size();
  r.num_videos = videos.size();
  for (const auto& p : preds) ++r.confusion[{p.truth, p.predicted}];
  return r;
}

inline nlohmann::json report_to_json(const MetricsReport& r, const HierarchyTree& tree) {
  auto level = [](const LevelAccuracy& a) {
    return nlohmann::json{{"accuracy", a.class_acc}, {"sibling_accuracy", a.sibling}, {"cousin_accuracy", a.cousin}};
  };
  nlohmann::json conf = nlohmann::json::array();
  for (const auto& [k, n] : r.confusion)
    conf.push_back({{"truth", k.first},
                    {"truth_name", tree.node(k.first).name},
                    {"predicted", k.second},
                    {"predicted_name", tree.node(k.second).name},
                    {"count", n}});
  return {{"clip", level(r.clip)},
          {"video", level(r.video)},
          {"num_clips", r.num_clips},
          {"num_videos", r.num_videos},
          {"confusion", std::move(conf)}};
}

/// Percentages with two decimals, one row per granularity.
inline std::string report_to_csv(const MetricsReport& r) {
  std::string out = "level,accuracy,sibling_accuracy,cousin_accuracy\n";
  char buf[128];
  for (const auto& [name, a] : {std::pair{"clip", r.clip}, std::pair{"video", r.video}}) {
    std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f\n", name, 100.0 * a.class_acc, 100.0 * a.sibling,
                  100.0 * a.cousin);
    out += buf;
  }
  return out;
}

}  // namespace hyperproto
