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

// Primitives of the unit-curvature Poincare ball D^n.
//
// Every function here is pure. Points handed back to callers are always
// strictly inside the ball: anything that lands at or beyond
// 1 - kBoundaryEps is pulled radially back to exactly that norm.

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>

#include "hyperproto/errors.hpp"
#include "hyperproto/vecops.hpp"

namespace hyperproto::poincare {

inline constexpr double kBoundaryEps = 1e-5;
inline constexpr double kMaxRadius = 1.0 - kBoundaryEps;
/// Upper clamp for the argument of artanh inside distance().
inline constexpr double kArtanhClamp = 1.0 - 1e-7;

/// A point of the open unit ball.
struct BallPoint {
  Vec coords;

  std::size_t dim() const { return coords.size(); }
  std::span<const double> view() const { return coords; }
  friend bool operator==(const BallPoint&, const BallPoint&) = default;
};

/// A Euclidean vector in the tangent space at the origin.
struct TangentVector {
  Vec coords;

  std::size_t dim() const { return coords.size(); }
  std::span<const double> view() const { return coords; }
};

inline BallPoint project_to_ball(std::span<const double> v) {
  if (!all_finite(v)) throw ArgumentError("project_to_ball: non-finite input");
  BallPoint out{Vec(v.begin(), v.end())};
  const double r = norm(v);
  if (r >= kMaxRadius) {
    const double s = kMaxRadius / r;
    for (double& x : out.coords) x *= s;
  }
  return out;
}

/// Mobius sum without the final projection. Used where the exact value
/// matters (distance) rather than the ball invariant.
inline Vec mobius_add_raw(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b, "mobius_add");
  const double ab = dot(a, b);
  const double aa = squared_norm(a);
  const double bb = squared_norm(b);
  const double ca = 1.0 + 2.0 * ab + bb;
  const double cb = 1.0 - aa;
  const double den = 1.0 + 2.0 * ab + aa * bb;
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (ca * a[i] + cb * b[i]) / den;
  return out;
}

inline BallPoint mobius_add(const BallPoint& a, const BallPoint& b) {
  return project_to_ball(mobius_add_raw(a.coords, b.coords));
}

/// d(a, b) = 2 artanh(|(-a) (+) b|)
inline double distance(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b, "distance");
  Vec neg_a(a.begin(), a.end());
  for (double& x : neg_a) x = -x;
  const double r = std::clamp(norm(mobius_add_raw(neg_a, b)), 0.0, kArtanhClamp);
  return 2.0 * std::atanh(r);
}

inline double distance(const BallPoint& a, const BallPoint& b) {
  return distance(a.view(), b.view());
}

/// Euclidean partials of distance(a, b) with respect to a and b.
///
/// Uses the equivalent form d = arcosh(1 + 2|a-b|^2 / ((1-|a|^2)(1-|b|^2))).
/// Returns zeros where the distance is clamped or the points coincide.
inline std::pair<Vec, Vec> distance_grad(std::span<const double> a,
                                         std::span<const double> b) {
  require_same_dim(a, b, "distance_grad");
  const std::size_t n = a.size();
  std::pair<Vec, Vec> g{Vec(n, 0.0), Vec(n, 0.0)};

  Vec neg_a(a.begin(), a.end());
  for (double& x : neg_a) x = -x;
  if (norm(mobius_add_raw(neg_a, b)) >= kArtanhClamp) return g;

  double delta = 0.0;
  for (std::size_t i = 0; i < n; ++i) delta += (a[i] - b[i]) * (a[i] - b[i]);
  if (delta < 1e-300) return g;
  const double alpha = 1.0 - squared_norm(a);
  const double beta = 1.0 - squared_norm(b);
  const double gm1 = 2.0 * delta / (alpha * beta);  // gamma - 1
  const double inv = 1.0 / std::sqrt(gm1 * (gm1 + 2.0));

  for (std::size_t i = 0; i < n; ++i) {
    const double diff = a[i] - b[i];
    g.first[i] = inv * (4.0 * diff / (alpha * beta) + 4.0 * delta * a[i] / (alpha * alpha * beta));
    g.second[i] = inv * (-4.0 * diff / (alpha * beta) + 4.0 * delta * b[i] / (beta * beta * alpha));
  }
  return g;
}

/// exp_0(h) = tanh(|h|) h / |h|, then kept inside the ball.
inline BallPoint exp_map_zero(std::span<const double> h) {
  if (!all_finite(h)) throw ArgumentError("exp_map_zero: non-finite input");
  const double r = norm(h);
  if (r == 0.0) return BallPoint{Vec(h.size(), 0.0)};
  const double s = std::tanh(r) / r;
  Vec out(h.begin(), h.end());
  for (double& x : out) x *= s;
  return project_to_ball(out);
}

inline BallPoint exp_map_zero(const TangentVector& h) { return exp_map_zero(h.view()); }

/// Vector-Jacobian product of exp_map_zero (including the boundary clamp):
/// returns J(h)^T upstream.
inline Vec exp_map_zero_vjp(std::span<const double> h, std::span<const double> upstream) {
  require_same_dim(h, upstream, "exp_map_zero_vjp");
  const double r = norm(h);
  Vec out(upstream.begin(), upstream.end());
  if (r == 0.0) return out;
  const double t = std::tanh(r);
  const double hg = dot(h, upstream);
  if (t >= kMaxRadius) {
    // Radially clamped: y = kMaxRadius * h / r.
    const double s = kMaxRadius / r;
    for (std::size_t i = 0; i < h.size(); ++i)
      out[i] = s * (upstream[i] - hg * h[i] / (r * r));
    return out;
  }
  const double sech2 = 1.0 - t * t;
  const double coef = (sech2 - t / r) / (r * r);
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = (t / r) * upstream[i] + coef * hg * h[i];
  return out;
}

/// Inverse metric factor (1 - |x|^2)^2 / 4 applied to a Euclidean gradient.
inline Vec riemannian_rescale(std::span<const double> x, std::span<const double> euclidean_grad) {
  require_same_dim(x, euclidean_grad, "riemannian_rescale");
  const double f = 1.0 - squared_norm(x);
  const double s = f * f / 4.0;
  Vec out(euclidean_grad.begin(), euclidean_grad.end());
  for (double& g : out) g *= s;
  return out;
}

}  // namespace hyperproto::poincare
