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

// Training schedule:
//
//   epoch e < warmup          warm-up, all newly added groups
//   epoch e >= warmup         joint (templates too when fine-tuning them)
//   (e + 1) % period == 0     after a joint epoch: project prototypes, then
//                             `finetune` head-only epochs (not counted in e)
//
// Adam state persists per parameter group across phases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperproto/adam.hpp"
#include "hyperproto/errors.hpp"
#include "hyperproto/evalmetrics.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/poincare.hpp"
#include "hyperproto/protonet.hpp"
#include "hyperproto/rng.hpp"
#include "hyperproto/tensorio.hpp"

namespace hyperproto {

enum class Phase { warmup, joint, finetune };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::warmup: return "warmup";
    case Phase::joint: return "joint";
    case Phase::finetune: return "finetune";
  }
  return "?";
}

struct GroupRates {
  double adapters = 0.0;
  double prototypes = 0.0;
  double head = 0.0;
  double templates = 0.0;

  double of(ParamGroup g) const {
    switch (g) {
      case ParamGroup::adapters: return adapters;
      case ParamGroup::prototypes: return prototypes;
      case ParamGroup::head: return head;
    }
    return 0.0;
  }
};

struct TrainConfig {
  int warmup_epochs = 5;
  int total_epochs = 40;
  int projection_period = 10;
  int finetune_epochs_after_projection = 5;
  // The hyperbolic head saturates quickly, so its rate stays small.
  GroupRates warmup_lr{3e-3, 3e-3, 1e-4, 0.0};
  GroupRates joint_lr{1e-3, 3e-3, 1e-4, 1e-4};
  GroupRates finetune_lr{0.0, 0.0, 1e-4, 0.0};
  int batch_size = 16;
  std::uint64_t seed = 0;
  Variant variant = Variant::cpg;
  bool finetune_templates = false;

  void validate() const {
    if (projection_period < 1) throw ConfigError("train: projection_period must be >= 1");
    if (warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
    if (total_epochs < 1) throw ConfigError("train: total_epochs must be >= 1");
    if (warmup_epochs > total_epochs) throw ConfigError("train: warmup_epochs must not exceed total_epochs");
    if (finetune_epochs_after_projection < 0) throw ConfigError("train: finetune epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  }
};

struct EpochRecord {
  int step = 0;   // position in the full schedule, finetune epochs included
  int epoch = 0;  // scheduled epoch this pass belongs to
  Phase phase = Phase::warmup;
  LossTerms loss;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct ProjectionEvent {
  int step = 0;
  int epoch = 0;
  int prototype = 0;
  int owner = 0;
  bool moved = false;  // false: empty pool, prototype unchanged
  std::string clip_id;
  int w = 0, h = 0, t = 0;
  double pre_distance = 0.0;
  double post_distance = 0.0;
  friend bool operator==(const ProjectionEvent&, const ProjectionEvent&) = default;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<ProjectionEvent> projections;
  std::vector<std::string> warnings;
  friend bool operator==(const TrainReport&, const TrainReport&) = default;
};

/// Adapted features of every clip, computed once per projection.
inline std::vector<FeatureGrid> adapt_all(const DatasetManifest& data, const ModelState& model) {
  std::vector<FeatureGrid> out;
  out.reserve(data.clips.size());
  for (const auto& c : data.clips) out.push_back(adapt(c.grid, model.params.adapters));
  return out;
}

/// Replaces each eligible prototype by its nearest training patch, where
/// the candidates come from clips whose label path contains the owner.
/// With the base variant only child prototypes move. Ties go to the lowest
/// (clip_id, scan position).
inline std::vector<ProjectionEvent> project_prototypes(ModelState& model, const DatasetManifest& data,
                                                       const HierarchyTree& tree, Variant variant) {
  const std::vector<FeatureGrid> z = adapt_all(data, model);
  std::vector<std::size_t> order(data.clips.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data.clips[a].clip_id < data.clips[b].clip_id; });

  const auto& shape = model.config.proto;
  const auto D = static_cast<std::size_t>(model.config.channels);
  std::vector<ProjectionEvent> events;
  for (std::size_t j = 0; j < model.num_prototypes(); ++j) {
    const int owner = model.owners[j];
    if (variant == Variant::base && tree.level(owner) != Level::child) continue;
    ProjectionEvent ev;
    ev.prototype = static_cast<int>(j);
    ev.owner = owner;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_clip = 0;
    std::size_t best_pos = 0;
    for (std::size_t ci : order) {
      if (!on_ancestor_path(tree, data.clips[ci].label, owner)) continue;
      const Vec dmap = patch_distances(z[ci], model.prototype(j), shape);
      for (std::size_t p = 0; p < dmap.size(); ++p)
        if (dmap[p] < best) {
          best = dmap[p];
          best_clip = ci;
          best_pos = p;
        }
    }
    if (!std::isfinite(best)) {
      events.push_back(ev);
      continue;
    }
    const PositionGrid pg = positions_for(z[best_clip].dims(), shape);
    const auto [pw, ph, pt] = pg.coords(best_pos);
    std::span<double> proto = model.prototype(j);
    std::size_t off = 0;
    for (int dt = 0; dt < shape.t; ++dt)
      for (int dh = 0; dh < shape.h; ++dh)
        for (int dw = 0; dw < shape.w; ++dw, off += D) {
          const auto cell = z[best_clip].cell(pw + dw, ph + dh, pt + dt);
          std::copy(cell.begin(), cell.end(), proto.begin() + static_cast<std::ptrdiff_t>(off));
        }
    ev.moved = true;
    ev.clip_id = data.clips[best_clip].clip_id;
    ev.w = pw;
    ev.h = ph;
    ev.t = pt;
    ev.pre_distance = best;
    ev.post_distance = window_distance(z[best_clip], proto, shape, pw, ph, pt);
    model.provenance[j] = Provenance{ev.clip_id, pw, ph, pt};
    events.push_back(std::move(ev));
  }
  return events;
}

inline PredictionSet predict_clips(const DatasetManifest& data, const ModelState& model, const HierarchyTree& tree) {
  PredictionSet out;
  out.reserve(data.clips.size());
  for (const auto& c : data.clips) {
    const ForwardResult f = forward(c.grid, model);
    Vec probs = predict_probabilities(f, model);
    const int pred = predicted_child(probs, model, tree);
    out.push_back({c.clip_id, c.video_id, c.label, pred, std::move(probs)});
  }
  return out;
}

/// Pure evaluation pass over a split.
inline MetricsReport evaluate_epoch(const ModelState& model, const DatasetManifest& data, const HierarchyTree& tree) {
  return full_report(predict_clips(data, model, tree), tree);
}

namespace detail {

class Trainer {
 public:
  Trainer(ModelState& model, const DatasetManifest& data, const HierarchyTree& tree, const TrainConfig& cfg)
      : model_(model), data_(data), tree_(tree), cfg_(cfg) {
    for (ParamGroup g : kAllGroups)
      for (auto v : model_.params.views(g)) adam_[static_cast<int>(g)].emplace_back(v.size());
    template_adam_.assign(static_cast<std::size_t>(model_.templates.node_count()),
                          AdamState(static_cast<std::size_t>(model_.templates.dim())));
  }

  TrainReport run() {
    for (int e = 0; e < cfg_.total_epochs; ++e) {
      const Phase phase = e < cfg_.warmup_epochs ? Phase::warmup : Phase::joint;
      run_epoch(e, phase);
      if (e >= cfg_.warmup_epochs && (e + 1) % cfg_.projection_period == 0) {
        auto events = project_prototypes(model_, data_, tree_, cfg_.variant);
        for (auto& ev : events) {
          ev.step = step_ - 1;
          ev.epoch = e;
          if (!ev.moved)
            report_.warnings.push_back("epoch " + std::to_string(e) + ": class " + std::to_string(ev.owner) +
                                       " has no training clips, prototype " + std::to_string(ev.prototype) +
                                       " left unchanged");
          report_.projections.push_back(std::move(ev));
        }
        for (int k = 0; k < cfg_.finetune_epochs_after_projection; ++k) run_epoch(e, Phase::finetune);
      }
    }
    return std::move(report_);
  }

 private:
  const GroupRates& rates(Phase p) const {
    return p == Phase::warmup ? cfg_.warmup_lr : p == Phase::joint ? cfg_.joint_lr : cfg_.finetune_lr;
  }
  static bool group_active(Phase p, ParamGroup g) { return p != Phase::finetune || g == ParamGroup::head; }

  void run_epoch(int epoch, Phase phase) {
    std::vector<const ClipRecord*> clips;
    clips.reserve(data_.clips.size());
    for (const auto& c : data_.clips) clips.push_back(&c);
    Rng rng(derive_seed(cfg_.seed, 0x7472000000ULL + static_cast<std::uint64_t>(step_)));
    std::shuffle(clips.begin(), clips.end(), rng);

    const bool tune_templates =
        phase == Phase::joint && cfg_.finetune_templates && model_.config.head == HeadMode::hyperbolic;
    const GroupRates& lr = rates(phase);
    EpochRecord rec{step_, epoch, phase, {}};
    const double n = static_cast<double>(clips.size());
    for (std::size_t b = 0; b < clips.size(); b += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t e = std::min(clips.size(), b + static_cast<std::size_t>(cfg_.batch_size));
      std::span<const ClipRecord* const> batch(clips.data() + b, e - b);
      BatchLoss bl = total_loss(batch, model_, tree_, tune_templates);
      const double wgt = static_cast<double>(batch.size()) / n;
      rec.loss.crs += wgt * bl.terms.crs;
      rec.loss.cluster += wgt * bl.terms.cluster;
      rec.loss.separation += wgt * bl.terms.separation;
      rec.loss.total += wgt * bl.terms.total;
      check_finite(epoch, bl.terms);

      for (ParamGroup g : kAllGroups) {
        if (!group_active(phase, g) || lr.of(g) == 0.0) continue;
        auto params = model_.params.views(g);
        auto grads = bl.grad.params.views(g);
        auto& states = adam_[static_cast<int>(g)];
        for (std::size_t i = 0; i < params.size(); ++i) states[i].step(params[i], grads[i], lr.of(g));
      }
      if (tune_templates && lr.templates != 0.0) step_templates(bl.grad.templates, lr.templates);
    }
    report_.epochs.push_back(rec);
    ++step_;
  }

  void check_finite(int epoch, const LossTerms& t) const {
    const char* bad = !std::isfinite(t.crs)          ? "crs"
                      : !std::isfinite(t.cluster)    ? "cluster"
                      : !std::isfinite(t.separation) ? "separation"
                                                     : nullptr;
    if (bad) throw TrainingError("non-finite " + std::string(bad) + " loss at epoch " + std::to_string(epoch), epoch);
  }

  void step_templates(const Vec& grad, double lr) {
    const auto dim = static_cast<std::size_t>(model_.templates.dim());
    for (int id = 1; id <= model_.templates.node_count(); ++id) {
      std::span<double> col = model_.templates.column(id);
      std::span<const double> g(grad.data() + static_cast<std::size_t>(id - 1) * dim, dim);
      const Vec rg = poincare::riemannian_rescale(col, g);
      template_adam_[static_cast<std::size_t>(id - 1)].step(col, rg, lr);
      const poincare::BallPoint p = poincare::project_to_ball(col);
      std::copy(p.coords.begin(), p.coords.end(), col.begin());
    }
  }

  ModelState& model_;
  const DatasetManifest& data_;
  const HierarchyTree& tree_;
  const TrainConfig& cfg_;
  std::vector<AdamState> adam_[3];
  std::vector<AdamState> template_adam_;
  TrainReport report_;
  int step_ = 0;
};

}  // namespace detail

/// Trains `model` in place on `data` following the schedule above.
inline TrainReport train_model(ModelState& model, const DatasetManifest& data, const HierarchyTree& tree,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (data.clips.empty()) throw ConfigError("train: empty training set");
  if (data.dims.d != model.config.in_channels)
    throw ConfigError("train: grids have " + std::to_string(data.dims.d) + " channels, model expects " +
                      std::to_string(model.config.in_channels));
  return detail::Trainer(model, data, tree, cfg).run();
}

struct TrainResult {
  ModelState model;
  TrainReport report;
};

/// Initializes a model from (tree, phi, model config) and trains it.
inline TrainResult run_training(const DatasetManifest& data, const HierarchyTree& tree, const TemplateMatrix& phi,
                                ModelConfig mcfg, const TrainConfig& cfg) {
  mcfg.variant = cfg.variant;
  if (cfg.variant == Variant::base) mcfg.ancestor_prototypes = 0;
  TrainResult r{init_model(tree, phi, mcfg, derive_seed(cfg.seed, 0x6d6f64656c)), {}};
  r.report = train_model(r.model, data, tree, cfg);
  return r;
}

inline nlohmann::json loss_json(const LossTerms& t) {
  return {{"crs", t.crs}, {"cluster", t.cluster}, {"separation", t.separation}, {"total", t.total}};
}

/// JSON lines ordered by schedule step: one "epoch" line per pass, then
/// "projection" and "warning" lines for the projection that followed it.
inline std::string report_to_jsonl(const TrainReport& r, const std::string& config_hash) {
  std::string out;
  auto emit = [&](nlohmann::json j) {
    j["config_hash"] = config_hash;
    out += j.dump() + "\n";
  };
  std::size_t pi = 0;
  for (const auto& e : r.epochs) {
    emit({{"type", "epoch"}, {"step", e.step}, {"epoch", e.epoch}, {"phase", to_string(e.phase)},
          {"loss", loss_json(e.loss)}});
    for (; pi < r.projections.size() && r.projections[pi].step == e.step; ++pi) {
      const auto& p = r.projections[pi];
      nlohmann::json j{{"type", p.moved ? "projection" : "warning"}, {"step", p.step}, {"epoch", p.epoch},
                       {"prototype", p.prototype}, {"owner", p.owner}};
      if (p.moved) {
        j["source"] = {{"clip_id", p.clip_id}, {"position", {p.w, p.h, p.t}}};
        j["pre_distance"] = p.pre_distance;
        j["post_distance"] = p.post_distance;
      } else {
        j["message"] = "owner class has no training clips; prototype unchanged";
      }
      emit(std::move(j));
    }
  }
  return out;
}

}  // namespace hyperproto
