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

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace hyperproto {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment buffers for one parameter group.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(std::size_t size) : m_(size, 0.0), v_(size, 0.0) {}

  /// One bias-corrected Adam step: x -= lr * m_hat / (sqrt(v_hat) + eps).
  void step(std::span<double> x, std::span<const double> grad, double lr,
            const AdamParams& p = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[i] = p.beta1 * m_[i] + (1.0 - p.beta1) * grad[i];
      v_[i] = p.beta2 * v_[i] + (1.0 - p.beta2) * grad[i] * grad[i];
      x[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + p.epsilon);
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

}  // namespace hyperproto
