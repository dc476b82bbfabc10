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

// Hierarchical prototype network over precomputed feature grids.
//
//   features --adapt--> Z --patch distances--> d_j(pos) --min--> d_j
//   s_j = log((d_j + 1) / (d_j + eps))            (max similarity == min distance)
//   h   = W_head s
//   h_e = exp_0(h)                                 (hyperbolic head)
//   p(k | clip) = softmax_k(-dist(h_e, template_k))
//
// With HeadMode::euclidean the head emits class logits directly and the
// hyperbolic stage is skipped, which together with zero ancestor prototypes
// is the plain ProtoPNet objective.
//
// Every loss returns a value to be minimized and an analytic gradient for
// each parameter group.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hyperproto/binary_io.hpp"
#include "hyperproto/embed.hpp"
#include "hyperproto/errors.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/poincare.hpp"
#include "hyperproto/rng.hpp"
#include "hyperproto/tensorio.hpp"
#include "hyperproto/vecops.hpp"

namespace hyperproto {

enum class HeadMode { hyperbolic, euclidean };
enum class Variant { base, cpg };

inline std::string_view to_string(HeadMode m) { return m == HeadMode::hyperbolic ? "hyperbolic" : "euclidean"; }
inline std::string_view to_string(Variant v) { return v == Variant::base ? "base" : "cpg"; }

struct PrototypeShape {
  int w = 1, h = 1, t = 1;
  friend bool operator==(const PrototypeShape&, const PrototypeShape&) = default;
};

struct ModelConfig {
  int in_channels = 64;
  int channels = 64;            // D after the adapters
  int child_prototypes = 10;    // m, per child class
  int ancestor_prototypes = 5;  // n, per parent / grandparent class
  PrototypeShape proto;
  double epsilon = 1e-4;
  double lambda1 = 0.8;  // clustering weight
  double lambda2 = 0.08;  // separation weight
  HeadMode head = HeadMode::hyperbolic;
  Variant variant = Variant::cpg;
  /// Let the softmax range over ancestor templates too (labels stay children).
  bool softmax_over_ancestors = false;
  double leaky_slope = 0.01;
  double head_init_gain = 0.1;

  void validate() const {
    if (in_channels < 1 || channels < 1) throw ConfigError("model: channel counts must be >= 1");
    if (child_prototypes < 1) throw ConfigError("model: child_prototypes must be >= 1");
    if (ancestor_prototypes < 0) throw ConfigError("model: ancestor_prototypes must be >= 0");
    if (proto.w < 1 || proto.h < 1 || proto.t < 1) throw ConfigError("model: prototype extent must be >= 1");
    if (!(epsilon > 0)) throw ConfigError("model: epsilon must be > 0");
    if (lambda1 < 0 || lambda2 < 0) throw ConfigError("model: loss weights must be >= 0");
    if (head == HeadMode::euclidean && softmax_over_ancestors)
      throw ConfigError("model: euclidean head does not support ancestor logits");
  }
};

inline double leaky(double x, double slope) { return x >= 0.0 ? x : slope * x; }
inline double leaky_grad(double x, double slope) { return x >= 0.0 ? 1.0 : slope; }

/// Two pointwise channel-mixing layers, each followed by LeakyReLU.
/// Weights are row-major (out x in).
struct AdapterStack {
  int in = 0;
  int out = 0;
  Vec w1, b1;  // out x in, out
  Vec w2, b2;  // out x out, out
  double slope = 0.01;

  friend bool operator==(const AdapterStack&, const AdapterStack&) = default;
};

/// Per-cell intermediates needed to backpropagate through the adapters.
struct AdapterCache {
  Vec pre1;  // cells x out
  Vec act1;  // cells x out
  Vec pre2;  // cells x out
};

namespace detail {

inline void dense(std::span<const double> w, std::span<const double> b, std::span<const double> x,
                  std::span<double> y) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < y.size(); ++o) {
    double s = b[o];
    const double* row = w.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
    y[o] = s;
  }
}

}  // namespace detail

inline FeatureGrid adapt(const FeatureGrid& features, const AdapterStack& a, AdapterCache* cache = nullptr) {
  if (features.dims().d != a.in)
    throw ArgumentError("adapt: grid has " + std::to_string(features.dims().d) + " channels, adapters expect " +
                        std::to_string(a.in));
  GridDims od = features.dims();
  od.d = a.out;
  FeatureGrid out(od);
  const std::size_t cells = od.cells();
  const auto no = static_cast<std::size_t>(a.out);
  const auto ni = static_cast<std::size_t>(a.in);
  AdapterCache local;
  AdapterCache& c = cache ? *cache : local;
  c.pre1.assign(cells * no, 0.0);
  c.act1.assign(cells * no, 0.0);
  c.pre2.assign(cells * no, 0.0);
  for (std::size_t k = 0; k < cells; ++k) {
    std::span<const double> x(features.data().data() + k * ni, ni);
    std::span<double> p1(c.pre1.data() + k * no, no), a1(c.act1.data() + k * no, no), p2(c.pre2.data() + k * no, no);
    detail::dense(a.w1, a.b1, x, p1);
    for (std::size_t o = 0; o < no; ++o) a1[o] = leaky(p1[o], a.slope);
    detail::dense(a.w2, a.b2, a1, p2);
    for (std::size_t o = 0; o < no; ++o) out.data()[k * no + o] = leaky(p2[o], a.slope);
  }
  return out;
}

/// Accumulates adapter parameter gradients (and optionally the input
/// gradient) given dL/d(adapted output).
inline void adapt_backward(const FeatureGrid& features, const AdapterStack& a, const AdapterCache& c,
                           std::span<const double> d_out, AdapterStack& grad, Vec* d_input = nullptr) {
  const std::size_t cells = features.dims().cells();
  const auto no = static_cast<std::size_t>(a.out);
  const auto ni = static_cast<std::size_t>(a.in);
  if (d_input) d_input->assign(cells * ni, 0.0);
  Vec g2(no), g1(no);
  for (std::size_t k = 0; k < cells; ++k) {
    bool any = false;
    for (std::size_t o = 0; o < no; ++o) {
      g2[o] = d_out[k * no + o] * leaky_grad(c.pre2[k * no + o], a.slope);
      any = any || g2[o] != 0.0;
    }
    if (!any) continue;
    const double* a1 = c.act1.data() + k * no;
    std::fill(g1.begin(), g1.end(), 0.0);
    for (std::size_t o = 0; o < no; ++o) {
      if (g2[o] == 0.0) continue;
      grad.b2[o] += g2[o];
      double* gw = grad.w2.data() + o * no;
      const double* w = a.w2.data() + o * no;
      for (std::size_t i = 0; i < no; ++i) {
        gw[i] += g2[o] * a1[i];
        g1[i] += g2[o] * w[i];
      }
    }
    const double* x = features.data().data() + k * ni;
    for (std::size_t o = 0; o < no; ++o) {
      const double g = g1[o] * leaky_grad(c.pre1[k * no + o], a.slope);
      if (g == 0.0) continue;
      grad.b1[o] += g;
      double* gw = grad.w1.data() + o * ni;
      const double* w = a.w1.data() + o * ni;
      for (std::size_t i = 0; i < ni; ++i) {
        gw[i] += g * x[i];
        if (d_input) (*d_input)[k * ni + i] += g * w[i];
      }
    }
  }
}

/// Valid sliding-window positions of a prototype over a grid.
struct PositionGrid {
  int w = 1, h = 1, t = 1;
  std::size_t count() const {
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(t);
  }
  /// Scan order: T outermost, then H, then W.
  std::size_t index(int pw, int ph, int pt) const {
    return (static_cast<std::size_t>(pt) * static_cast<std::size_t>(h) + static_cast<std::size_t>(ph)) *
               static_cast<std::size_t>(w) + static_cast<std::size_t>(pw);
  }
  std::array<int, 3> coords(std::size_t idx) const {
    const int pw = static_cast<int>(idx % static_cast<std::size_t>(w));
    const int ph = static_cast<int>((idx / static_cast<std::size_t>(w)) % static_cast<std::size_t>(h));
    const int pt = static_cast<int>(idx / (static_cast<std::size_t>(w) * static_cast<std::size_t>(h)));
    return {pw, ph, pt};
  }
};

inline PositionGrid positions_for(const GridDims& g, const PrototypeShape& p) {
  if (p.w > g.w || p.h > g.h || p.t > g.t) throw ArgumentError("prototype is larger than the feature grid");
  return {g.w - p.w + 1, g.h - p.h + 1, g.t - p.t + 1};
}

/// Squared distance between a prototype (laid out like a grid of extent
/// `shape`) and the window whose origin is (pw, ph, pt).
inline double window_distance(const FeatureGrid& z, std::span<const double> proto, const PrototypeShape& shape,
                              int pw, int ph, int pt) {
  const auto d = static_cast<std::size_t>(z.dims().d);
  double s = 0.0;
  std::size_t off = 0;
  for (int dt = 0; dt < shape.t; ++dt)
    for (int dh = 0; dh < shape.h; ++dh)
      for (int dw = 0; dw < shape.w; ++dw, off += d) {
        const auto cell = z.cell(pw + dw, ph + dh, pt + dt);
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = cell[c] - proto[off + c];
          s += diff * diff;
        }
      }
  return s;
}

/// Squared distances for every valid window (stride 1, no padding), in
/// PositionGrid scan order.
inline Vec patch_distances(const FeatureGrid& z, std::span<const double> proto, const PrototypeShape& shape) {
  const PositionGrid pg = positions_for(z.dims(), shape);
  const std::size_t need = static_cast<std::size_t>(shape.w) * static_cast<std::size_t>(shape.h) *
                           static_cast<std::size_t>(shape.t) * static_cast<std::size_t>(z.dims().d);
  if (proto.size() != need) throw ArgumentError("patch_distances: prototype size does not match its shape");
  Vec out(pg.count());
  for (int pt = 0; pt < pg.t; ++pt)
    for (int ph = 0; ph < pg.h; ++ph)
      for (int pw = 0; pw < pg.w; ++pw) out[pg.index(pw, ph, pt)] = window_distance(z, proto, shape, pw, ph, pt);
  return out;
}

inline double similarity(double sq_dist, double epsilon) {
  return std::log((sq_dist + 1.0) / (sq_dist + epsilon));
}

inline double similarity_derivative(double sq_dist, double epsilon) {
  return 1.0 / (sq_dist + 1.0) - 1.0 / (sq_dist + epsilon);
}

struct SimilarityScore {
  double score = 0.0;
  std::size_t position = 0;
};

/// Max over positions of log((d + 1) / (d + eps)); first position wins ties.
inline SimilarityScore similarity_score(std::span<const double> distance_map, double epsilon) {
  if (distance_map.empty()) throw ArgumentError("similarity_score: empty distance map");
  SimilarityScore best{similarity(distance_map[0], epsilon), 0};
  for (std::size_t i = 1; i < distance_map.size(); ++i) {
    const double s = similarity(distance_map[i], epsilon);
    if (s > best.score) best = {s, i};
  }
  return best;
}

/// Trainable parameters, grouped the way the training schedule addresses them.
enum class ParamGroup { adapters, prototypes, head };
inline constexpr std::array<ParamGroup, 3> kAllGroups{ParamGroup::adapters, ParamGroup::prototypes, ParamGroup::head};

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::adapters: return "adapters";
    case ParamGroup::prototypes: return "prototypes";
    case ParamGroup::head: return "head";
  }
  return "?";
}

struct Parameters {
  AdapterStack adapters;
  Vec prototypes;  // P x (proto cells * D)
  Vec head;        // rows x P, row-major

  /// Flat views over every group member, for optimizers and gradient checks.
  std::vector<std::span<double>> views(ParamGroup g) {
    switch (g) {
      case ParamGroup::adapters: return {adapters.w1, adapters.b1, adapters.w2, adapters.b2};
      case ParamGroup::prototypes: return {prototypes};
      case ParamGroup::head: return {head};
    }
    return {};
  }

  /// Same shapes, all zeros.
  Parameters zeros_like() const {
    Parameters z = *this;
    for (Vec* v : {&z.adapters.w1, &z.adapters.b1, &z.adapters.w2, &z.adapters.b2, &z.prototypes, &z.head})
      std::fill(v->begin(), v->end(), 0.0);
    return z;
  }

  void add_scaled(double alpha, const Parameters& o) {
    axpy(alpha, o.adapters.w1, adapters.w1);
    axpy(alpha, o.adapters.b1, adapters.b1);
    axpy(alpha, o.adapters.w2, adapters.w2);
    axpy(alpha, o.adapters.b2, adapters.b2);
    axpy(alpha, o.prototypes, prototypes);
    axpy(alpha, o.head, head);
  }

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Where a projected prototype was copied from.
struct Provenance {
  std::string clip_id;
  int w = 0, h = 0, t = 0;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ModelState {
  ModelConfig config;
  Parameters params;
  std::vector<int> owners;      // owning class id per prototype
  std::vector<int> head_classes;  // class id per softmax entry
  TemplateMatrix templates;     // frozen unless fine-tuning is requested
  std::vector<std::optional<Provenance>> provenance;

  std::size_t num_prototypes() const { return owners.size(); }
  std::size_t proto_size() const {
    return static_cast<std::size_t>(config.proto.w) * static_cast<std::size_t>(config.proto.h) *
           static_cast<std::size_t>(config.proto.t) * static_cast<std::size_t>(config.channels);
  }
  std::span<const double> prototype(std::size_t j) const {
    return {params.prototypes.data() + j * proto_size(), proto_size()};
  }
  std::span<double> prototype(std::size_t j) {
    return {params.prototypes.data() + j * proto_size(), proto_size()};
  }
  /// Output width of the head: embedding dim, or class count when euclidean.
  std::size_t head_rows() const {
    return config.head == HeadMode::hyperbolic ? static_cast<std::size_t>(templates.dim()) : head_classes.size();
  }
};

inline std::vector<int> prototype_owners(const HierarchyTree& tree, const ModelConfig& cfg) {
  std::vector<int> owners;
  for (const auto& n : tree.nodes()) {
    const int k = n.level == Level::child ? cfg.child_prototypes : cfg.ancestor_prototypes;
    for (int i = 0; i < k; ++i) owners.push_back(n.id);
  }
  return owners;
}

/// log_0, the inverse of exp_0: artanh(|x|) x / |x|.
inline Vec log_map_zero(std::span<const double> x) {
  const double r = norm(x);
  Vec out(x.begin(), x.end());
  if (r == 0.0) return out;
  const double s = std::atanh(std::min(r, poincare::kArtanhClamp)) / r;
  for (double& v : out) v *= s;
  return out;
}

/// Fresh model. Prototypes are uniform on [0, 1); adapters use a seeded
/// uniform fan-in init with zero bias. The head starts from a class-identity
/// connection matrix C (1 when the prototype's owner lies on class k's
/// ancestor path, -0.5 otherwise) scaled by 1/sqrt(P); the hyperbolic head
/// maps it through the unit directions of the log-mapped templates,
/// W = dir(log_0(T)) C / sqrt(P). Templates sit close to the boundary, so
/// their raw log-map norms would start h_e on the clamp.
inline ModelState init_model(const HierarchyTree& tree, const TemplateMatrix& templates, const ModelConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate();
  if (templates.node_count() != tree.size())
    throw ConfigError("init_model: template matrix has " + std::to_string(templates.node_count()) +
                      " columns, hierarchy has " + std::to_string(tree.size()) + " nodes");
  ModelState m;
  m.config = cfg;
  m.templates = templates;
  m.owners = prototype_owners(tree, cfg);
  for (const auto& n : tree.nodes())
    if (n.level == Level::child || cfg.softmax_over_ancestors) m.head_classes.push_back(n.id);
  m.provenance.assign(m.owners.size(), std::nullopt);

  Rng rng(derive_seed(seed, 0x696e6974));
  auto& a = m.params.adapters;
  a.in = cfg.in_channels;
  a.out = cfg.channels;
  a.slope = cfg.leaky_slope;
  const auto no = static_cast<std::size_t>(cfg.channels);
  const auto ni = static_cast<std::size_t>(cfg.in_channels);
  auto fill = [&](Vec& v, std::size_t n, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    v.resize(n);
    for (double& x : v) x = u(rng);
  };
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
  fill(a.w1, no * ni, gain * std::sqrt(3.0 / static_cast<double>(ni)));
  a.b1.assign(no, 0.0);
  fill(a.w2, no * no, gain * std::sqrt(3.0 / static_cast<double>(no)));
  a.b2.assign(no, 0.0);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  m.params.prototypes.resize(m.owners.size() * m.proto_size());
  for (double& x : m.params.prototypes) x = unit(rng);

  const std::size_t P = m.owners.size();
  const std::size_t K = m.head_classes.size();
  const double scale = cfg.head_init_gain / std::sqrt(static_cast<double>(P));
  std::vector<double> conn(K * P);
  for (std::size_t k = 0; k < K; ++k) {
    const int cls = m.head_classes[k];
    for (std::size_t j = 0; j < P; ++j) {
      const int owner = m.owners[j];
      bool on_path = owner == cls;
      if (!on_path && tree.level(cls) == Level::child) on_path = on_ancestor_path(tree, cls, owner);
      conn[k * P + j] = (on_path ? 1.0 : -0.5) * scale;
    }
  }
  if (cfg.head == HeadMode::euclidean) {
    m.params.head = std::move(conn);
  } else {
    const auto dim = static_cast<std::size_t>(templates.dim());
    m.params.head.assign(dim * P, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      Vec t = log_map_zero(templates.column(m.head_classes[k]));
      const double tn = norm(t);
      if (tn > 0) for (double& x : t) x /= tn;
      for (std::size_t r = 0; r < dim; ++r)
        for (std::size_t j = 0; j < P; ++j) m.params.head[r * P + j] += t[r] * conn[k * P + j];
    }
  }
  return m;
}

/// Intermediates of one forward pass.
struct ForwardResult {
  AdapterCache adapter_cache;
  FeatureGrid adapted;
  std::vector<Vec> distance_maps;  // per prototype
  Vec min_distance;                // per prototype
  std::vector<std::size_t> argmin;  // per prototype, scan-order position
  Vec similarities;                // per prototype
  Vec h;                           // head output (tangent vector or logits)
  poincare::BallPoint h_e;         // exp_0(h); empty for the euclidean head
};

inline ForwardResult forward(const FeatureGrid& clip, const ModelState& model) {
  const auto& cfg = model.config;
  ForwardResult r;
  r.adapted = adapt(clip, model.params.adapters, &r.adapter_cache);
  const std::size_t P = model.num_prototypes();
  r.distance_maps.resize(P);
  r.min_distance.resize(P);
  r.argmin.resize(P);
  r.similarities.resize(P);
  for (std::size_t j = 0; j < P; ++j) {
    r.distance_maps[j] = patch_distances(r.adapted, model.prototype(j), cfg.proto);
    const SimilarityScore s = similarity_score(r.distance_maps[j], cfg.epsilon);
    r.argmin[j] = s.position;
    r.min_distance[j] = r.distance_maps[j][s.position];
    r.similarities[j] = s.score;
  }
  const std::size_t rows = model.head_rows();
  r.h.assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    r.h[i] = dot(std::span<const double>(model.params.head.data() + i * P, P), r.similarities);
  if (cfg.head == HeadMode::hyperbolic) {
    // A blown-up head yields NaN logits so the trainer can report the loss term.
    r.h_e = all_finite(r.h) ? poincare::exp_map_zero(r.h)
                            : poincare::BallPoint{Vec(rows, std::numeric_limits<double>::quiet_NaN())};
  }
  return r;
}

inline Vec softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(logits[i] - m));
  for (double& x : p) x /= s;
  return p;
}

/// softmax over -dist(h_e, template_k) for k in class_set.
inline Vec class_probabilities(const poincare::BallPoint& h_e, const TemplateMatrix& phi,
                               std::span<const int> class_set) {
  if (class_set.empty()) throw ArgumentError("class_probabilities: empty class set");
  Vec logits(class_set.size());
  for (std::size_t k = 0; k < class_set.size(); ++k) logits[k] = -poincare::distance(h_e.view(), phi.column(class_set[k]));
  return softmax(logits);
}

/// Logits over model.head_classes for an already computed forward pass.
inline Vec head_logits(const ForwardResult& f, const ModelState& model) {
  if (model.config.head == HeadMode::euclidean) return f.h;
  Vec logits(model.head_classes.size());
  for (std::size_t k = 0; k < logits.size(); ++k)
    logits[k] = -poincare::distance(f.h_e.view(), model.templates.column(model.head_classes[k]));
  return logits;
}

inline Vec predict_probabilities(const ForwardResult& f, const ModelState& model) {
  return softmax(head_logits(f, model));
}

/// Child class with the highest probability (ancestor entries ignored).
inline int predicted_child(const Vec& probs, const ModelState& model, const HierarchyTree& tree) {
  int best = -1;
  double bp = -1.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const int cls = model.head_classes[k];
    if (tree.level(cls) != Level::child) continue;
    if (probs[k] > bp) {
      bp = probs[k];
      best = cls;
    }
  }
  return best;
}

/// Gradient buffers for a backward pass.
struct Gradients {
  Parameters params;
  Vec templates;  // like TemplateMatrix::flat(); only filled when requested
};

inline Gradients zero_gradients(const ModelState& m, bool with_templates) {
  Gradients g{m.params.zeros_like(), {}};
  if (with_templates) g.templates.assign(m.templates.flat().size(), 0.0);
  return g;
}

/// Backpropagates dL/d(head output after exp map) and extra dL/d(min
/// distance) terms through one forward pass. `d_out` is dL/dh_e for the
/// hyperbolic head and dL/dlogits-as-h for the euclidean head.
inline void backward(const FeatureGrid& clip, const ForwardResult& f, const ModelState& model,
                     std::span<const double> d_out, std::span<const double> d_min_distance, Gradients& g,
                     Vec* d_input = nullptr) {
  const auto& cfg = model.config;
  const std::size_t P = model.num_prototypes();
  const std::size_t rows = model.head_rows();

  Vec d_h = cfg.head == HeadMode::hyperbolic && !d_out.empty() ? poincare::exp_map_zero_vjp(f.h, d_out)
                                                               : Vec(d_out.begin(), d_out.end());
  Vec d_min(P, 0.0);
  if (!d_min_distance.empty()) std::copy(d_min_distance.begin(), d_min_distance.end(), d_min.begin());
  if (!d_h.empty()) {
    for (std::size_t i = 0; i < rows; ++i) {
      if (d_h[i] == 0.0) continue;
      double* gw = g.params.head.data() + i * P;
      const double* w = model.params.head.data() + i * P;
      for (std::size_t j = 0; j < P; ++j) {
        gw[j] += d_h[i] * f.similarities[j];
        d_min[j] += d_h[i] * w[j] * similarity_derivative(f.min_distance[j], cfg.epsilon);
      }
    }
  }

  const auto D = static_cast<std::size_t>(cfg.channels);
  const PositionGrid pg = positions_for(f.adapted.dims(), cfg.proto);
  Vec d_adapted(f.adapted.data().size(), 0.0);
  for (std::size_t j = 0; j < P; ++j) {
    if (d_min[j] == 0.0) continue;
    const auto [pw, ph, pt] = pg.coords(f.argmin[j]);
    std::span<const double> proto = model.prototype(j);
    double* gp = g.params.prototypes.data() + j * model.proto_size();
    std::size_t off = 0;
    for (int dt = 0; dt < cfg.proto.t; ++dt)
      for (int dh = 0; dh < cfg.proto.h; ++dh)
        for (int dw = 0; dw < cfg.proto.w; ++dw, off += D) {
          const std::size_t base = f.adapted.cell_index(pw + dw, ph + dh, pt + dt) * D;
          for (std::size_t c = 0; c < D; ++c) {
            const double diff = f.adapted.data()[base + c] - proto[off + c];
            gp[off + c] -= 2.0 * d_min[j] * diff;
            d_adapted[base + c] += 2.0 * d_min[j] * diff;
          }
        }
  }
  adapt_backward(clip, model.params.adapters, f.adapter_cache, d_adapted, g.params.adapters, d_input);
}

struct LossTerms {
  double crs = 0.0;
  double cluster = 0.0;
  double separation = 0.0;
  double total = 0.0;
  friend bool operator==(const LossTerms&, const LossTerms&) = default;
};

struct LossWeights {
  double crs = 1.0;
  double cluster = 0.0;
  double separation = 0.0;
};

struct BatchLoss {
  LossTerms terms;
  Gradients grad;
};

/// Indices of prototypes owned by a class on the label's ancestor path.
inline std::vector<char> on_path_mask(const ModelState& model, const HierarchyTree& tree, int label) {
  std::vector<char> mask(model.num_prototypes());
  for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = on_ancestor_path(tree, label, model.owners[j]) ? 1 : 0;
  return mask;
}

/// Evaluates crs, cluster and separation terms over a batch and accumulates
/// the weighted gradient. All terms are batch means.
inline BatchLoss evaluate_batch(std::span<const ClipRecord* const> batch, const ModelState& model,
                                const HierarchyTree& tree, const LossWeights& w, bool template_grad = false) {
  if (batch.empty()) throw ArgumentError("loss: empty batch");
  BatchLoss out{{}, zero_gradients(model, template_grad)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t P = model.num_prototypes();
  const bool hyper = model.config.head == HeadMode::hyperbolic;

  for (const ClipRecord* clip : batch) {
    if (tree.level(clip->label) != Level::child) throw ArgumentError("loss: label must be a child class");
    const ForwardResult f = forward(clip->grid, model);

    // Cross-entropy over the head classes.
    const Vec logits = head_logits(f, model);
    const Vec probs = softmax(logits);
    std::size_t target = model.head_classes.size();
    for (std::size_t k = 0; k < model.head_classes.size(); ++k)
      if (model.head_classes[k] == clip->label) target = k;
    if (target == model.head_classes.size()) throw ArgumentError("loss: label not in the head's class set");
    out.terms.crs += -std::log(std::max(probs[target], std::numeric_limits<double>::min())) * inv_n;

    Vec d_out;
    if (w.crs != 0.0) {
      Vec d_logits(probs.size());
      for (std::size_t k = 0; k < probs.size(); ++k) d_logits[k] = w.crs * inv_n * (probs[k] - (k == target ? 1.0 : 0.0));
      if (hyper) {
        // logit_k = -dist(h_e, T_k)
        d_out.assign(f.h_e.dim(), 0.0);
        for (std::size_t k = 0; k < d_logits.size(); ++k) {
          const int cls = model.head_classes[k];
          auto [gh, gt] = poincare::distance_grad(f.h_e.view(), model.templates.column(cls));
          axpy(-d_logits[k], gh, d_out);
          if (template_grad) {
            std::span<double> dst(out.grad.templates.data() + static_cast<std::size_t>(cls - 1) * gt.size(), gt.size());
            axpy(-d_logits[k], gt, dst);
          }
        }
      } else {
        d_out = std::move(d_logits);
      }
    }

    // Cluster / separation over min patch distances.
    const std::vector<char> mask = on_path_mask(model, tree, clip->label);
    std::size_t best_on = P, best_off = P;
    for (std::size_t j = 0; j < P; ++j) {
      std::size_t& best = mask[j] ? best_on : best_off;
      if (best == P || f.min_distance[j] < f.min_distance[best]) best = j;
    }
    if (best_on == P) throw ConfigError("loss: no prototypes on the ancestor path of class " + std::to_string(clip->label));
    Vec d_min(P, 0.0);
    out.terms.cluster += f.min_distance[best_on] * inv_n;
    d_min[best_on] += w.cluster * inv_n;
    if (best_off != P) {
      out.terms.separation -= f.min_distance[best_off] * inv_n;
      d_min[best_off] -= w.separation * inv_n;
    }
    backward(clip->grid, f, model, d_out, d_min, out.grad);
  }
  out.terms.total = w.crs * out.terms.crs + w.cluster * out.terms.cluster + w.separation * out.terms.separation;
  return out;
}

inline BatchLoss loss_crs(std::span<const ClipRecord* const> batch, const ModelState& model, const HierarchyTree& tree) {
  BatchLoss b = evaluate_batch(batch, model, tree, {1.0, 0.0, 0.0});
  b.terms.total = b.terms.crs;
  return b;
}

inline BatchLoss loss_cluster(std::span<const ClipRecord* const> batch, const ModelState& model,
                              const HierarchyTree& tree) {
  BatchLoss b = evaluate_batch(batch, model, tree, {0.0, 1.0, 0.0});
  b.terms.total = b.terms.cluster;
  return b;
}

inline BatchLoss loss_separation(std::span<const ClipRecord* const> batch, const ModelState& model,
                                 const HierarchyTree& tree) {
  BatchLoss b = evaluate_batch(batch, model, tree, {0.0, 0.0, 1.0});
  b.terms.total = b.terms.separation;
  return b;
}

/// crs + lambda1 * cluster + lambda2 * separation.
inline BatchLoss total_loss(std::span<const ClipRecord* const> batch, const ModelState& model,
                            const HierarchyTree& tree, bool template_grad = false) {
  return evaluate_batch(batch, model, tree, {1.0, model.config.lambda1, model.config.lambda2}, template_grad);
}

// Checkpoint, little-endian:
//   "HPMS" | u32 version | config block | u32 P | P x i32 owner |
//   u32 K | K x i32 head class | adapters | prototypes | head |
//   provenance | u64 template file hash | u64 config hash
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline Bytes save_checkpoint(const ModelState& m, std::uint64_t template_hash, std::uint64_t config_hash = 0) {
  ByteWriter w;
  w.magic("HPMS");
  w.u32(kCheckpointVersion);
  const auto& c = m.config;
  w.i32(c.in_channels);
  w.i32(c.channels);
  w.i32(c.child_prototypes);
  w.i32(c.ancestor_prototypes);
  w.i32(c.proto.w);
  w.i32(c.proto.h);
  w.i32(c.proto.t);
  w.f64(c.epsilon);
  w.f64(c.lambda1);
  w.f64(c.lambda2);
  w.u32(c.head == HeadMode::hyperbolic ? 0 : 1);
  w.u32(c.variant == Variant::base ? 0 : 1);
  w.u32(c.softmax_over_ancestors ? 1 : 0);
  w.f64(c.leaky_slope);
  w.i32(m.templates.dim());
  w.i32(m.templates.node_count());
  w.u32(static_cast<std::uint32_t>(m.owners.size()));
  for (int o : m.owners) w.i32(o);
  w.u32(static_cast<std::uint32_t>(m.head_classes.size()));
  for (int k : m.head_classes) w.i32(k);
  w.f64s(m.params.adapters.w1);
  w.f64s(m.params.adapters.b1);
  w.f64s(m.params.adapters.w2);
  w.f64s(m.params.adapters.b2);
  w.f64s(m.params.prototypes);
  w.f64s(m.params.head);
  for (const auto& p : m.provenance) {
    w.u32(p ? 1 : 0);
    if (p) {
      w.str(p->clip_id);
      w.i32(p->w);
      w.i32(p->h);
      w.i32(p->t);
    }
  }
  w.u64(template_hash);
  w.u64(config_hash);
  return std::move(w).bytes();
}

struct LoadedCheckpoint {
  ModelState model;
  std::uint64_t template_hash = 0;
  std::uint64_t config_hash = 0;
};

/// Restores a checkpoint. `templates` must be the matrix whose file hash was
/// recorded at save time; pass `expected_template_hash` to enforce that.
inline LoadedCheckpoint load_checkpoint(const Bytes& bytes, const TemplateMatrix& templates,
                                        std::optional<std::uint64_t> expected_template_hash = std::nullopt) {
  try {
    ByteReader r(bytes);
    r.expect_magic("HPMS");
    const std::size_t at_version = r.offset();
    if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version", at_version);
    LoadedCheckpoint out;
    ModelState& m = out.model;
    auto& c = m.config;
    c.in_channels = r.i32();
    c.channels = r.i32();
    c.child_prototypes = r.i32();
    c.ancestor_prototypes = r.i32();
    c.proto.w = r.i32();
    c.proto.h = r.i32();
    c.proto.t = r.i32();
    c.epsilon = r.f64();
    c.lambda1 = r.f64();
    c.lambda2 = r.f64();
    c.head = r.u32() == 0 ? HeadMode::hyperbolic : HeadMode::euclidean;
    c.variant = r.u32() == 0 ? Variant::base : Variant::cpg;
    c.softmax_over_ancestors = r.u32() != 0;
    c.leaky_slope = r.f64();
    const std::size_t at_dims = r.offset();
    const int tdim = r.i32();
    const int tcount = r.i32();
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw FormatError(std::string("invalid model config: ") + e.what(), at_dims);
    }
    if (tdim != templates.dim() || tcount != templates.node_count())
      throw LoadError("checkpoint was trained against templates of a different shape");

    const std::uint32_t P = r.u32();
    r.need(std::size_t{P} * 4, "owners");
    for (std::uint32_t j = 0; j < P; ++j) m.owners.push_back(r.i32());
    const std::uint32_t K = r.u32();
    r.need(std::size_t{K} * 4, "head classes");
    for (std::uint32_t k = 0; k < K; ++k) m.head_classes.push_back(r.i32());
    for (int o : m.owners)
      if (o < 1 || o > tcount) throw LoadError("checkpoint prototype owner out of range");
    for (int k : m.head_classes)
      if (k < 1 || k > tcount) throw LoadError("checkpoint head class out of range");
    m.templates = templates;

    auto read_vec = [&](Vec& v, std::size_t n, const char* what) {
      r.need(n * 8, what);
      v.resize(n);
      for (double& x : v) x = r.f64();
    };
    auto& a = m.params.adapters;
    a.in = c.in_channels;
    a.out = c.channels;
    a.slope = c.leaky_slope;
    const auto no = static_cast<std::size_t>(c.channels), ni = static_cast<std::size_t>(c.in_channels);
    read_vec(a.w1, no * ni, "adapter weights");
    read_vec(a.b1, no, "adapter bias");
    read_vec(a.w2, no * no, "adapter weights");
    read_vec(a.b2, no, "adapter bias");
    read_vec(m.params.prototypes, P * m.proto_size(), "prototypes");
    read_vec(m.params.head, m.head_rows() * P, "head");
    for (std::uint32_t j = 0; j < P; ++j) {
      if (r.u32() == 0) {
        m.provenance.emplace_back(std::nullopt);
        continue;
      }
      Provenance p;
      p.clip_id = r.str();
      p.w = r.i32();
      p.h = r.i32();
      p.t = r.i32();
      m.provenance.emplace_back(std::move(p));
    }
    out.template_hash = r.u64();
    out.config_hash = r.u64();
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
    if (expected_template_hash && *expected_template_hash != out.template_hash)
      throw LoadError("checkpoint references template file " + hex64(out.template_hash) + " but " +
                      hex64(*expected_template_hash) + " was supplied");
    return out;
  } catch (const FormatError& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace hyperproto
