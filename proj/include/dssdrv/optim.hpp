// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dssdrv/nn.hpp"

namespace dssdrv {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    DSSDRV_CHECK(lr >= 0.0 && std::isfinite(lr), ConfigError, "learning rate must be finite and >= 0, got ", lr);
    DSSDRV_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ConfigError,
                 "Adam betas must lie in [0,1), got ", beta1, ", ", beta2);
    DSSDRV_CHECK(eps > 0.0, ConfigError, "Adam eps must be positive");
  }
};

// Adam with bias correction. Moments are kept per tensor in the order of the
// ParameterSet it was built for.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const AdamConfig& cfg, const ParameterSet<T>& set) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : set.params) {
      m_.emplace_back(p.tensor->numel(), T(0));
      v_.emplace_back(p.tensor->numel(), T(0));
    }
  }

  void zero_grad(ParameterSet<T>& set) const {
    for (auto& p : set.params) p.tensor->zero_grad();
  }

  void step(ParameterSet<T>& set) {
    DSSDRV_CHECK(set.params.size() == m_.size(), ShapeError, "optimizer built for ", m_.size(),
                 " tensors, got ", set.params.size());
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < set.params.size(); ++i) {
      auto& p = *set.params[i].tensor;
      DSSDRV_CHECK(p.numel() == m_[i].size(), ShapeError, "optimizer state for ", set.params[i].name,
                   " has the wrong size");
      auto w = p.data();
      auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj);
        v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj);
        const double mh = m[j] / c1, vh = v[j] / c2;
        w[j] = static_cast<T>(w[j] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace dssdrv
