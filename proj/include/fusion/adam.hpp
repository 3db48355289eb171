#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fusion/error.hpp"
#include "fusion/params.hpp"

namespace fusion {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with per-tensor moment state and step counters, so a group can be
/// reset (e.g. W when it is re-initialised) while the others persist.
class Adam {
 public:
  Adam() = default;
  Adam(const ParameterBundle& shape, AdamConfig cfg = {}) : cfg_(cfg), m_(shape.zeros_like()), v_(shape.zeros_like()) {
    steps_.assign(shape.views().size(), 0);
  }

  void reset(GroupMask mask) {
    auto m = m_.views();
    auto v = v_.views();
    for (std::size_t t = 0; t < m.size(); ++t) {
      if (!mask.contains(m[t].group)) continue;
      std::fill(m[t].values.begin(), m[t].values.end(), 0.0);
      std::fill(v[t].values.begin(), v[t].values.end(), 0.0);
      steps_[t] = 0;
    }
  }

  /// Zero the moments of one row of the named tensor (column-major storage).
  void reset_rows(const std::string& tensor, Eigen::Index row) {
    auto m = m_.views();
    auto v = v_.views();
    for (std::size_t t = 0; t < m.size(); ++t) {
      if (m[t].name != tensor) continue;
      const std::size_t rows = std::size_t(m[t].shape.front());
      if (row < 0 || std::size_t(row) >= rows) throw ShapeError("row outside tensor " + tensor);
      for (std::size_t i = std::size_t(row); i < m[t].values.size(); i += rows) m[t].values[i] = v[t].values[i] = 0.0;
      return;
    }
    throw ShapeError("no tensor named " + tensor);
  }

  /// One update of the groups in `mask`. A zero learning rate leaves both
  /// parameters and optimiser state untouched.
  void step(ParameterBundle& params, const ParameterBundle& grad, double lr, GroupMask mask) {
    if (lr == 0.0) return;
    auto p = params.views();
    auto g = grad.views();
    auto m = m_.views();
    auto v = v_.views();
    if (p.size() != g.size() || p.size() != m.size()) throw ShapeError("Adam state does not match the parameters");
    for (std::size_t t = 0; t < p.size(); ++t) {
      if (!mask.contains(p[t].group)) continue;
      const int k = ++steps_[t];
      const double c1 = 1.0 - std::pow(cfg_.beta1, k);
      const double c2 = 1.0 - std::pow(cfg_.beta2, k);
      for (std::size_t i = 0; i < p[t].values.size(); ++i) {
        const double gi = g[t].values[i];
        m[t].values[i] = cfg_.beta1 * m[t].values[i] + (1.0 - cfg_.beta1) * gi;
        v[t].values[i] = cfg_.beta2 * v[t].values[i] + (1.0 - cfg_.beta2) * gi * gi;
        p[t].values[i] -= lr * (m[t].values[i] / c1) / (std::sqrt(v[t].values[i] / c2) + cfg_.epsilon);
      }
    }
  }

  const std::vector<int>& steps() const { return steps_; }

 private:
  AdamConfig cfg_;
  ParameterBundle m_, v_;
  std::vector<int> steps_;
};

}  // namespace fusion
