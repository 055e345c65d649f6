// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "dssdrv/tensor.hpp"

namespace dssdrv {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates sampled per parameter tensor; tensors smaller than this are
  // checked exhaustively.
  std::size_t coords_per_tensor = 24;
  std::uint64_t seed = 0;
  // When > 0, each coordinate is also differenced with this step and by
  // Richardson extrapolation at eps; the smallest error is kept. ReLU-type
  // kinks crossed inside +-eps corrupt one difference but rarely all; a wrong
  // gradient fails at every step.
  double confirm_eps = 0.0;
  double wide_eps = 1e-3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares the recorded-graph gradient of a scalar function with central
// differences. Error per coordinate is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                                  const GradCheckOptions& opts = {}) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  backward(f());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  std::mt19937_64 rng(opts.seed);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opts.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (auto idx : coords) {
      const double saved = p[idx];
      auto central = [&](double h) {
        p[idx] = saved + h;
        const double up = f().item();
        p[idx] = saved - h;
        const double down = f().item();
        p[idx] = saved;
        return (up - down) / (2.0 * h);
      };
      const double a = analytic[pi][idx];
      auto error = [a](double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); };
      double numeric = central(opts.eps);
      double err = error(numeric);
      if (opts.confirm_eps > 0.0 && err > 0.0) {
        // Richardson extrapolation cancels the h^2 term, so a wide step keeps
        // truncation small while cutting roundoff for tiny gradients.
        auto richardson = [&](double h) { return (4.0 * central(0.5 * h) - central(h)) / 3.0; };
        for (double n2 : {central(opts.confirm_eps), richardson(opts.eps), richardson(opts.wide_eps)})
          if (error(n2) < err) numeric = n2, err = error(n2);
      }
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace dssdrv
