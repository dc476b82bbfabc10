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

// Hierarchical class templates in the Poincare ball.
//
// The objective is L_H + lambda * L_S, where
//
//   L_H = sum over positives (v, u = parent(v)) of
//           d(v, u) + log sum_{u' in N_v} exp(-d(v, u'))
//
// is the negated log-ratio "exp(-d(v,u)) / sum exp(-d(v,u'))" so that lower
// is better, and
//
//   L_S = sum over child classes i of
//           -|| S_i^T S_i ||_F + gamma * || Q_i Q_i^T - I ||_F
//
// with S_i the template columns of i's siblings and Q_i the columns of the
// child classes that are not siblings of i (i itself excluded).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "hyperproto/adam.hpp"
#include "hyperproto/binary_io.hpp"
#include "hyperproto/errors.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/poincare.hpp"
#include "hyperproto/rng.hpp"

namespace hyperproto {

/// One ball point per hierarchy node; column k holds node id k + 1.
class TemplateMatrix {
 public:
  TemplateMatrix() = default;
  TemplateMatrix(int dim, int node_count)
      : dim_(dim), count_(node_count),
        data_(static_cast<std::size_t>(dim) * static_cast<std::size_t>(node_count), 0.0) {}

  int dim() const { return dim_; }
  int node_count() const { return count_; }

  std::span<double> column(int id) {
    check(id);
    return {data_.data() + offset(id), static_cast<std::size_t>(dim_)};
  }
  std::span<const double> column(int id) const {
    check(id);
    return {data_.data() + offset(id), static_cast<std::size_t>(dim_)};
  }

  std::vector<double>& flat() { return data_; }
  const std::vector<double>& flat() const { return data_; }

  friend bool operator==(const TemplateMatrix&, const TemplateMatrix&) = default;

 private:
  void check(int id) const {
    if (id < 1 || id > count_) throw ArgumentError("template column " + std::to_string(id) + " out of range");
  }
  std::size_t offset(int id) const {
    return static_cast<std::size_t>(id - 1) * static_cast<std::size_t>(dim_);
  }

  int dim_ = 0;
  int count_ = 0;
  std::vector<double> data_;
};

struct EmbedConfig {
  int dim = 256;
  int epochs = 1000;
  double learning_rate = 1e-3;
  double lambda = 0.1;
  double gamma = 0.1;
  int negatives_per_positive = 10;
  std::uint64_t seed = 0;
  /// Put the positive pair into the softmax denominator as well.
  bool include_positive_in_denominator = false;
  /// Flip the sign of the sibling-Gram term of L_S.
  bool flip_sibling_term = false;
  /// Templates start uniform in [-init_scale, init_scale] per coordinate.
  double init_scale = 1e-3;

  void validate() const {
    if (dim < 2) throw ConfigError("embed: dim must be >= 2");
    if (epochs < 1) throw ConfigError("embed: epochs must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("embed: learning_rate must be > 0");
    if (lambda < 0 || gamma < 0) throw ConfigError("embed: lambda and gamma must be >= 0");
    if (negatives_per_positive < 1) throw ConfigError("embed: negatives_per_positive must be >= 1");
    if (!(init_scale > 0) || init_scale * std::sqrt(static_cast<double>(dim)) >= 1.0)
      throw ConfigError("embed: init_scale must place templates inside the ball");
  }
};

/// Scalar loss plus a gradient laid out like TemplateMatrix::flat().
struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// log( exp(-d_pos) / sum_k exp(-d_neg[k]) ), the per-pair term before the
/// sign is flipped for minimization.
inline double log_ratio_term(double d_pos, std::span<const double> d_neg) {
  double m = std::numeric_limits<double>::infinity();
  for (double d : d_neg) m = std::min(m, d);
  double s = 0.0;
  for (double d : d_neg) s += std::exp(-(d - m));
  return -d_pos - (-m + std::log(s));
}

inline LossAndGrad hierarchy_loss(const TemplateMatrix& phi, const PairBatch& batch,
                                  bool include_positive_in_denominator = false) {
  if (batch.positives.empty()) throw ArgumentError("hierarchy_loss: empty batch");
  if (batch.negatives.size() != batch.positives.size())
    throw ArgumentError("hierarchy_loss: negatives do not match positives");

  LossAndGrad out{0.0, std::vector<double>(phi.flat().size(), 0.0)};
  const auto dim = static_cast<std::size_t>(phi.dim());
  auto grad_col = [&](int id) {
    return std::span<double>(out.grad.data() + static_cast<std::size_t>(id - 1) * dim, dim);
  };
  auto accumulate = [&](int a, int b, double coef) {
    auto [ga, gb] = poincare::distance_grad(phi.column(a), phi.column(b));
    axpy(coef, ga, grad_col(a));
    axpy(coef, gb, grad_col(b));
  };

  for (std::size_t i = 0; i < batch.positives.size(); ++i) {
    const Pair& pos = batch.positives[i];
    const auto& negs = batch.negatives[i];
    if (negs.empty()) throw ArgumentError("hierarchy_loss: positive without negatives");

    const double d_pos = poincare::distance(phi.column(pos.child), phi.column(pos.parent));
    std::vector<double> denom;  // distances inside the softmax denominator
    denom.reserve(negs.size() + 1);
    for (const Pair& n : negs) denom.push_back(poincare::distance(phi.column(n.child), phi.column(n.parent)));
    if (include_positive_in_denominator) denom.push_back(d_pos);

    const double m = *std::min_element(denom.begin(), denom.end());
    double s = 0.0;
    for (double d : denom) s += std::exp(-(d - m));
    out.loss += d_pos + (-m + std::log(s));

    // d/d(d_k) of log sum exp(-d) is -softmax_k.
    double pos_coef = 1.0;
    for (std::size_t k = 0; k < negs.size(); ++k)
      accumulate(negs[k].child, negs[k].parent, -std::exp(-(denom[k] - m)) / s);
    if (include_positive_in_denominator) pos_coef -= std::exp(-(d_pos - m)) / s;
    accumulate(pos.child, pos.parent, pos_coef);
  }
  return out;
}

inline LossAndGrad separation_loss(const TemplateMatrix& phi, const HierarchyTree& tree, double gamma,
                                   bool flip_sibling_term = false) {
  const int na = tree.num_children();
  if (phi.node_count() != tree.size()) throw ArgumentError("separation_loss: template/tree size mismatch");
  const auto dim = static_cast<std::size_t>(phi.dim());
  const auto uz = [](int v) { return static_cast<std::size_t>(v); };

  // Gram matrix of the child columns; every per-class block is a sub-block.
  std::vector<double> gram(uz(na) * uz(na));
  for (int a = 0; a < na; ++a)
    for (int b = a; b < na; ++b)
      gram[uz(a) * uz(na) + uz(b)] = gram[uz(b) * uz(na) + uz(a)] = dot(phi.column(a + 1), phi.column(b + 1));
  auto g = [&](int a, int b) { return gram[uz(a - 1) * uz(na) + uz(b - 1)]; };

  // The gradient is linear in the columns: grad_a = sum_b coef(a,b) phi_b.
  std::vector<double> coef(uz(na) * uz(na), 0.0);
  auto c = [&](int a, int b) -> double& { return coef[uz(a - 1) * uz(na) + uz(b - 1)]; };

  const double sib_sign = flip_sibling_term ? 1.0 : -1.0;
  double loss = 0.0;
  for (int i = 1; i <= na; ++i) {
    const std::vector<int> sib = siblings(tree, i);
    std::vector<int> non;
    for (int k = 1; k <= na; ++k)
      if (k != i && tree.parent_of(k) != tree.parent_of(i)) non.push_back(k);

    double a2 = 0.0;
    for (int x : sib)
      for (int y : sib) a2 += g(x, y) * g(x, y);
    const double a_norm = std::sqrt(a2);
    loss += sib_sign * a_norm;
    if (a_norm > 0.0)
      for (int x : sib)
        for (int y : sib) c(x, y) += sib_sign * 2.0 * g(x, y) / a_norm;

    if (gamma != 0.0 && !non.empty()) {
      // ||Q Q^T - I||_F^2 = ||Q^T Q||_F^2 - 2 tr(Q^T Q) + n
      double k2 = 0.0, tr = 0.0;
      for (int x : non) {
        tr += g(x, x);
        for (int y : non) k2 += g(x, y) * g(x, y);
      }
      const double b_norm = std::sqrt(std::max(0.0, k2 - 2.0 * tr + static_cast<double>(dim)));
      loss += gamma * b_norm;
      if (b_norm > 0.0)
        for (int x : non)
          for (int y : non) c(x, y) += gamma * 2.0 * (g(x, y) - (x == y ? 1.0 : 0.0)) / b_norm;
    }
  }

  LossAndGrad out{loss, std::vector<double>(phi.flat().size(), 0.0)};
  for (int a = 1; a <= na; ++a) {
    std::span<double> ga(out.grad.data() + uz(a - 1) * dim, dim);
    for (int b = 1; b <= na; ++b) {
      const double w = c(a, b);
      if (w != 0.0) axpy(w, phi.column(b), ga);
    }
  }
  return out;
}

struct EmbedEpoch {
  int epoch = 0;
  double total = 0.0;
  double hierarchy = 0.0;
  double separation = 0.0;
};

struct EmbedResult {
  TemplateMatrix phi;
  std::vector<EmbedEpoch> trace;
};

inline TemplateMatrix init_templates(const HierarchyTree& tree, int dim, double scale, std::uint64_t seed) {
  TemplateMatrix phi(dim, tree.size());
  Rng rng(derive_seed(seed, 0x7e3d));
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& x : phi.flat()) x = u(rng);
  return phi;
}

/// Riemannian Adam over the template columns: Adam moments are kept on the
/// metric-rescaled gradient, and every step ends with a projection into the
/// ball. Negatives are resampled each epoch from derive_seed(seed, epoch).
inline EmbedResult train_embeddings(const HierarchyTree& tree, const EmbedConfig& cfg) {
  cfg.validate();
  EmbedResult res{init_templates(tree, cfg.dim, cfg.init_scale, cfg.seed), {}};
  TemplateMatrix& phi = res.phi;
  std::vector<AdamState> adam(static_cast<std::size_t>(tree.size()), AdamState(static_cast<std::size_t>(cfg.dim)));
  const auto dim = static_cast<std::size_t>(cfg.dim);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const PairBatch batch = sample_pairs(tree, cfg.negatives_per_positive, derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    LossAndGrad lh = hierarchy_loss(phi, batch, cfg.include_positive_in_denominator);
    EmbedEpoch rec{epoch, lh.loss, lh.loss, 0.0};
    if (cfg.lambda != 0.0) {
      const LossAndGrad ls = separation_loss(phi, tree, cfg.gamma, cfg.flip_sibling_term);
      rec.separation = ls.loss;
      rec.total += cfg.lambda * ls.loss;
      axpy(cfg.lambda, ls.grad, lh.grad);
    }
    if (!std::isfinite(rec.total) || !all_finite(lh.grad))
      throw TrainingError("train_embeddings diverged at epoch " + std::to_string(epoch), epoch);
    res.trace.push_back(rec);

    for (int id = 1; id <= tree.size(); ++id) {
      std::span<double> col = phi.column(id);
      std::span<const double> g(lh.grad.data() + static_cast<std::size_t>(id - 1) * dim, dim);
      const Vec rg = poincare::riemannian_rescale(col, g);
      adam[static_cast<std::size_t>(id - 1)].step(col, rg, cfg.learning_rate);
      const poincare::BallPoint p = poincare::project_to_ball(col);
      std::copy(p.coords.begin(), p.coords.end(), col.begin());
    }
  }
  return res;
}

// Template file, little-endian:
//   "HPTM" | u32 version | u32 dim | u32 node_count |
//   node_count x u32 node id | node_count x dim x f64 (column-major by node)
inline constexpr std::uint32_t kTemplateVersion = 1;

inline Bytes save_templates(const TemplateMatrix& phi) {
  ByteWriter w;
  w.magic("HPTM");
  w.u32(kTemplateVersion);
  w.u32(static_cast<std::uint32_t>(phi.dim()));
  w.u32(static_cast<std::uint32_t>(phi.node_count()));
  for (int id = 1; id <= phi.node_count(); ++id) w.u32(static_cast<std::uint32_t>(id));
  w.f64s(phi.flat());
  return std::move(w).bytes();
}

inline TemplateMatrix load_templates(const Bytes& bytes) {
  try {
    ByteReader r(bytes);
    r.expect_magic("HPTM");
    const std::size_t at_version = r.offset();
    if (r.u32() != kTemplateVersion) throw FormatError("unsupported template version", at_version);
    const std::uint32_t dim = r.u32();
    const std::uint32_t count = r.u32();
    if (dim < 1 || count < 1) throw FormatError("empty template header", r.offset());
    for (std::uint32_t k = 0; k < count; ++k) {
      const std::size_t at = r.offset();
      if (r.u32() != k + 1) throw FormatError("node ids must be 1..node_count in order", at);
    }
    r.need(std::size_t{dim} * count * 8, "template columns");
    TemplateMatrix phi(static_cast<int>(dim), static_cast<int>(count));
    for (double& x : phi.flat()) x = r.f64();
    if (r.remaining() != 0) throw FormatError("trailing bytes after template data", r.offset());
    for (int id = 1; id <= phi.node_count(); ++id) {
      if (!all_finite(phi.column(id)) || norm(phi.column(id)) >= 1.0)
        throw LoadError("template column for node " + std::to_string(id) + " is not inside the unit ball");
    }
    return phi;
  } catch (const FormatError& e) {
    throw LoadError(std::string("template file: ") + e.what());
  }
}

}  // namespace hyperproto
