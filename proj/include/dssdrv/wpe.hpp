// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Multichannel weighted prediction error dereverberation, batch form, one
// linear predictor per frequency bin.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>

#include "dssdrv/error.hpp"
#include "dssdrv/signal.hpp"

namespace dssdrv {

struct WpeConfig {
  int taps = 10;
  int delay = 3;
  int iterations = 3;
  double psd_floor = 1e-10;
  double loading = 1e-8;  // diagonal loading relative to trace(R) / dim
  int jobs = 1;

  void validate() const {
    DSSDRV_CHECK(taps >= 1, ConfigError, "WPE taps must be >= 1");
    DSSDRV_CHECK(delay >= 1, ConfigError, "WPE delay must be >= 1");
    DSSDRV_CHECK(iterations >= 1, ConfigError, "WPE iterations must be >= 1");
    DSSDRV_CHECK(psd_floor > 0.0, ConfigError, "WPE psd floor must be positive");
    DSSDRV_CHECK(loading >= 0.0, ConfigError, "WPE diagonal loading must be non-negative");
    DSSDRV_CHECK(jobs >= 1, ConfigError, "jobs must be at least 1");
  }
};

// Per-bin prediction filters, each [M*taps, M]; row tau*M + m weights
// channel m delayed by delay + tau frames.
struct WpeFilter {
  std::vector<Eigen::MatrixXcd> g;
};

struct WpeResult {
  std::vector<Stft> channels;
  WpeFilter filter;
  std::vector<double> lambda;     // [bins][frames] from the final estimate
  std::vector<double> objective;  // value after 0..iterations filter updates
  std::size_t cholesky_fallbacks = 0;
  std::size_t passthrough_bins = 0;
};

namespace detail {

inline Eigen::MatrixXcd channel_matrix(std::span<const Stft> y, std::size_t k) {
  const auto m = static_cast<Eigen::Index>(y.size());
  const auto t = static_cast<Eigen::Index>(y[0].frames);
  Eigen::MatrixXcd out(m, t);
  for (Eigen::Index c = 0; c < m; ++c)
    for (Eigen::Index n = 0; n < t; ++n) out(c, n) = y[static_cast<std::size_t>(c)].at(static_cast<std::size_t>(n), k);
  return out;
}

inline Eigen::MatrixXcd delayed_stack(const Eigen::MatrixXcd& y, int taps, int delay) {
  const Eigen::Index m = y.rows(), t = y.cols();
  Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(m * taps, t);
  for (int tau = 0; tau < taps; ++tau) {
    const Eigen::Index shift = delay + tau;
    if (shift >= t) break;
    out.block(tau * m, shift, m, t - shift) = y.leftCols(t - shift);
  }
  return out;
}

inline Eigen::VectorXd channel_psd(const Eigen::MatrixXcd& x, double floor) {
  Eigen::VectorXd lam = x.cwiseAbs2().colwise().mean().transpose();
  return lam.cwiseMax(floor);
}

// sum_n ||x(n)||^2 / lambda(n) + M sum_n log lambda(n)
inline double bin_objective(const Eigen::MatrixXcd& x, const Eigen::VectorXd& lam) {
  const Eigen::VectorXd e = x.cwiseAbs2().colwise().sum().transpose();
  return (e.array() / lam.array()).sum() + static_cast<double>(x.rows()) * lam.array().log().sum();
}

struct BinOutcome {
  Eigen::MatrixXcd x, g;
  Eigen::VectorXd lambda;
  std::vector<double> objective;
  bool fallback = false, passthrough = false;
};

inline BinOutcome wpe_bin(const Eigen::MatrixXcd& y, const WpeConfig& cfg) {
  BinOutcome out;
  const Eigen::MatrixXcd yt = delayed_stack(y, cfg.taps, cfg.delay);
  const Eigen::Index dim = yt.rows();
  out.x = y;
  out.g = Eigen::MatrixXcd::Zero(dim, y.rows());
  out.lambda = channel_psd(out.x, cfg.psd_floor);
  out.objective.push_back(bin_objective(out.x, out.lambda));
  for (int it = 0; it < cfg.iterations; ++it) {
    const Eigen::MatrixXcd w = yt * out.lambda.cwiseInverse().asDiagonal();
    Eigen::MatrixXcd r = w * yt.adjoint();
    const Eigen::MatrixXcd p = w * y.adjoint();
    const double trace = r.diagonal().real().sum();
    Eigen::MatrixXcd g;
    if (!(trace > 0.0)) {
      g = Eigen::MatrixXcd::Zero(dim, y.rows());
    } else {
      r.diagonal().array() += cfg.loading * trace / static_cast<double>(dim);
      Eigen::LLT<Eigen::MatrixXcd> llt(r);
      if (llt.info() == Eigen::Success) {
        g = llt.solve(p);
      } else {
        out.fallback = true;
        g = r.completeOrthogonalDecomposition().solve(p);
      }
      if (!g.allFinite()) {
        out.passthrough = true;
        g = Eigen::MatrixXcd::Zero(dim, y.rows());
      }
    }
    out.g = g;
    out.x = y - g.adjoint() * yt;
    out.lambda = channel_psd(out.x, cfg.psd_floor);
    out.objective.push_back(bin_objective(out.x, out.lambda));
  }
  return out;
}

inline void check_stft_set(std::span<const Stft> y) {
  DSSDRV_CHECK(!y.empty(), ShapeError, "WPE needs at least one channel");
  for (const auto& s : y)
    DSSDRV_CHECK(s.frames == y[0].frames && s.bins == y[0].bins, ShapeError,
                 "WPE channels must share frame and bin counts");
}

}  // namespace detail

// Objective of filter `f` with PSD `lambda` ([bins][frames]) on observation y.
inline double wpe_objective(std::span<const Stft> y, const WpeFilter& f, std::span<const double> lambda,
                            const WpeConfig& cfg = {}) {
  detail::check_stft_set(y);
  const std::size_t bins = y[0].bins, frames = y[0].frames;
  DSSDRV_CHECK(f.g.size() == bins && lambda.size() == bins * frames, ShapeError,
               "WPE objective: filter or PSD does not match the observation");
  double total = 0.0;
  for (std::size_t k = 0; k < bins; ++k) {
    const auto yk = detail::channel_matrix(y, k);
    const auto yt = detail::delayed_stack(yk, cfg.taps, cfg.delay);
    DSSDRV_CHECK(f.g[k].rows() == yt.rows() && f.g[k].cols() == yk.rows(), ShapeError,
                 "WPE objective: filter shape does not match taps and channels");
    const Eigen::MatrixXcd x = yk - f.g[k].adjoint() * yt;
    const Eigen::Map<const Eigen::VectorXd> lam(lambda.data() + k * frames, static_cast<Eigen::Index>(frames));
    total += detail::bin_objective(x, lam);
  }
  return total;
}

inline WpeResult wpe_dereverb(std::span<const Stft> y, const WpeConfig& cfg = {}) {
  cfg.validate();
  detail::check_stft_set(y);
  const std::size_t bins = y[0].bins, frames = y[0].frames;
  DSSDRV_CHECK(frames > static_cast<std::size_t>(cfg.delay + cfg.taps), ShapeError, "WPE needs more than ",
               cfg.delay + cfg.taps, " frames, got ", frames);
  std::vector<detail::BinOutcome> bins_out(bins);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < bins; k = next++) bins_out[k] = detail::wpe_bin(detail::channel_matrix(y, k), cfg);
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < cfg.jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  WpeResult res;
  res.channels.assign(y.begin(), y.end());
  res.objective.assign(static_cast<std::size_t>(cfg.iterations) + 1, 0.0);
  res.lambda.resize(bins * frames);
  res.filter.g.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    auto& b = bins_out[k];
    for (std::size_t c = 0; c < y.size(); ++c)
      for (std::size_t n = 0; n < frames; ++n)
        res.channels[c].at(n, k) = b.x(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
    for (std::size_t n = 0; n < frames; ++n) res.lambda[k * frames + n] = b.lambda(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < res.objective.size(); ++i) res.objective[i] += b.objective[i];
    res.filter.g[k] = std::move(b.g);
    res.cholesky_fallbacks += b.fallback;
    res.passthrough_bins += b.passthrough;
  }
  return res;
}

// Time-domain convenience: STFT, WPE, inverse STFT trimmed or zero-padded
// back to the input length.
inline std::vector<Waveform> wpe_waveforms(std::span<const Waveform> mics, const WpeConfig& cfg = {},
                                           WpeResult* detail_out = nullptr) {
  DSSDRV_CHECK(!mics.empty(), ShapeError, "WPE needs at least one channel");
  for (const auto& w : mics) {
    DSSDRV_CHECK(w.sample_rate == mics[0].sample_rate, FormatError, "WPE inputs have mixed sample rates");
    DSSDRV_CHECK(w.size() == mics[0].size(), ShapeError, "WPE inputs have different lengths");
  }
  std::vector<Stft> y;
  for (const auto& w : mics) y.push_back(stft(w));
  auto res = wpe_dereverb(y, cfg);
  std::vector<Waveform> out;
  for (const auto& s : res.channels) {
    auto samples = istft(s);
    samples.resize(mics[0].size(), 0.0);
    out.push_back({std::move(samples), mics[0].sample_rate});
  }
  if (detail_out) *detail_out = std::move(res);
  return out;
}

}  // namespace dssdrv
