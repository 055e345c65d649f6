// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// STFT analysis/synthesis and the log-spectrum pipeline around the network:
// joint RMS normalization, log magnitudes, [-1,1] slicing, and reconstruction
// with the phase of the loudest microphone.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "dssdrv/fft.hpp"
#include "dssdrv/tensor.hpp"
#include "dssdrv/wav.hpp"

namespace dssdrv {

inline constexpr int kFftSize = 512;
inline constexpr int kHop = 128;
inline constexpr int kSliceFrames = 256;
inline constexpr double kMagnitudeFloor = 1e-8;
inline constexpr double kTargetRms = 0.1;

// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

struct Stft {
  std::size_t frames = 0;
  std::size_t bins = 0;
  int fft_size = kFftSize;
  int hop = kHop;
  std::vector<Complex> values;  // [frames, bins]

  Complex& at(std::size_t t, std::size_t k) { return values[t * bins + k]; }
  const Complex& at(std::size_t t, std::size_t k) const { return values[t * bins + k]; }
};

inline std::size_t stft_frames(std::size_t n, int fft_size = kFftSize, int hop = kHop) {
  if (n < static_cast<std::size_t>(fft_size)) return 0;
  return (n - fft_size) / hop + 1;
}

// No centering: frame t covers samples [t*hop, t*hop + K).
inline Stft stft(std::span<const double> x, int fft_size = kFftSize, int hop = kHop) {
  DSSDRV_CHECK(x.size() >= static_cast<std::size_t>(fft_size), ShapeError, "signal of ", x.size(),
               " samples is shorter than one ", fft_size, "-sample window");
  Stft s;
  s.fft_size = fft_size;
  s.hop = hop;
  s.frames = stft_frames(x.size(), fft_size, hop);
  s.bins = static_cast<std::size_t>(fft_size) / 2 + 1;
  s.values.resize(s.frames * s.bins);
  const auto win = hann_window(fft_size);
  RealFft fft(fft_size);
  std::vector<double> frame(fft_size);
  std::vector<Complex> spec;
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (int i = 0; i < fft_size; ++i) frame[i] = x[t * hop + i] * win[i];
    fft.forward(frame, spec);
    std::copy(spec.begin(), spec.end(), s.values.begin() + static_cast<std::ptrdiff_t>(t * s.bins));
  }
  return s;
}

inline Stft stft(const Waveform& w) { return stft(w.samples); }

// Weighted overlap-add: x = sum_t w*frame_t / sum_t w^2. Output length
// (frames-1)*hop + K. The window mass is floored at 1% of its steady-state
// value so the tapered edges of a modified STFT are attenuated, not blown up.
inline std::vector<double> istft(const Stft& s) {
  if (s.frames == 0) return {};
  const std::size_t k = static_cast<std::size_t>(s.fft_size);
  const std::size_t len = (s.frames - 1) * s.hop + k;
  const auto win = hann_window(k);
  std::vector<double> out(len, 0.0), norm(len, 0.0), frame;
  RealFft fft(k);
  for (std::size_t t = 0; t < s.frames; ++t) {
    fft.inverse(std::span<const Complex>(s.values.data() + t * s.bins, s.bins), frame);
    for (std::size_t i = 0; i < k; ++i) {
      out[t * s.hop + i] += frame[i] * win[i];
      norm[t * s.hop + i] += win[i] * win[i];
    }
  }
  double steady = 0.0;
  for (double v : win) steady += v * v;
  const double floor = 0.01 * steady / static_cast<double>(s.hop);
  for (std::size_t i = 0; i < len; ++i) out[i] /= std::max(norm[i], floor);
  return out;
}

struct LogSpectrum {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> values;  // [frames, bins]
  bool normalized = false;

  double& at(std::size_t t, std::size_t k) { return values[t * bins + k]; }
  double at(std::size_t t, std::size_t k) const { return values[t * bins + k]; }
};

// ln(max(|S|, 1e-8)) per bin.
inline LogSpectrum log_magnitude(const Stft& s) {
  LogSpectrum out{s.frames, s.bins, std::vector<double>(s.values.size()), false};
  for (std::size_t i = 0; i < s.values.size(); ++i) out.values[i] = std::log(std::max(std::abs(s.values[i]), kMagnitudeFloor));
  return out;
}

inline double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

inline double mean_power(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

struct NormalizedSet {
  std::vector<Waveform> waves;
  double gain = 1.0;
};

// One common gain bringing the RMS of all signals taken together to `target`.
inline NormalizedSet rms_normalize(std::span<const Waveform> waves, double target = kTargetRms) {
  // Per-signal energies summed in sorted order: the gain is bit-identical under
  // any permutation of the set.
  std::vector<double> energies;
  std::size_t count = 0;
  for (const auto& w : waves) {
    double e = 0.0;
    for (double v : w.samples) e += v * v;
    energies.push_back(e);
    count += w.samples.size();
  }
  std::sort(energies.begin(), energies.end());
  double energy = 0.0;
  for (double e : energies) energy += e;
  DSSDRV_CHECK(count > 0 && energy > 0.0, NumericError, "cannot RMS-normalize an all-zero signal set");
  NormalizedSet out;
  out.gain = target / std::sqrt(energy / static_cast<double>(count));
  out.waves.assign(waves.begin(), waves.end());
  for (auto& w : out.waves)
    for (double& v : w.samples) v *= out.gain;
  return out;
}

// Index of the signal with the largest mean power; ties go to the lower index.
inline std::size_t select_phase_reference(std::span<const Waveform> waves) {
  DSSDRV_CHECK(!waves.empty(), ShapeError, "phase reference of an empty set");
  std::size_t best = 0;
  double best_power = mean_power(waves[0].samples);
  for (std::size_t i = 1; i < waves.size(); ++i) {
    const double p = mean_power(waves[i].samples);
    if (p > best_power) {
      best_power = p;
      best = i;
    }
  }
  return best;
}

// Global log-magnitude range used for the [-1,1] mapping.
struct NormStats {
  double min = 0.0;
  double max = 0.0;

  void validate() const {
    DSSDRV_CHECK(std::isfinite(min) && std::isfinite(max) && min < max, ConfigError,
                 "normalization range requires min < max, got [", min, ", ", max, "]");
  }

  double map(double x) const { return std::clamp(2.0 * (x - min) / (max - min) - 1.0, -1.0, 1.0); }
  double unmap(double v) const { return (v + 1.0) * 0.5 * (max - min) + min; }
};

// Accumulates the range over spectra, ignoring the top (Nyquist) bin.
class NormStatsAccumulator {
 public:
  void add(const LogSpectrum& s) {
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t k = 0; k + 1 < s.bins; ++k) {
        lo_ = std::min(lo_, s.at(t, k));
        hi_ = std::max(hi_, s.at(t, k));
      }
  }
  NormStats stats() const {
    NormStats st{lo_, hi_};
    st.validate();
    return st;
  }

 private:
  double lo_ = std::numeric_limits<double>::infinity();
  double hi_ = -std::numeric_limits<double>::infinity();
};

struct Slice {
  Tensor<float> data;  // [M, 1, slice_frames, bins-1]
  int valid_frames = 0;
};

// Drops the Nyquist bin, maps to [-1,1] (clamped) and cuts consecutive
// `slice_frames`-frame slices. The final partial slice is padded with -1.
inline std::vector<Slice> prepare_slices(std::span<const LogSpectrum> specs, const NormStats& stats,
                                         int slice_frames = kSliceFrames) {
  DSSDRV_CHECK(!specs.empty(), ShapeError, "prepare_slices needs at least one spectrum");
  const std::size_t frames = specs[0].frames, bins = specs[0].bins;
  for (const auto& s : specs)
    DSSDRV_CHECK(s.frames == frames && s.bins == bins, ShapeError, "all spectra must share frames and bins");
  DSSDRV_CHECK(frames > 0, ShapeError, "prepare_slices on a spectrum with no frames");
  DSSDRV_CHECK(bins >= 2, ShapeError, "prepare_slices needs at least two bins");
  stats.validate();
  const std::size_t f = bins - 1, m = specs.size(), ts = static_cast<std::size_t>(slice_frames);
  const std::size_t count = (frames + ts - 1) / ts;
  std::vector<Slice> out;
  out.reserve(count);
  for (std::size_t si = 0; si < count; ++si) {
    const std::size_t start = si * ts;
    const std::size_t valid = std::min(ts, frames - start);
    std::vector<float> data(m * ts * f, -1.0f);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < valid; ++t)
        for (std::size_t k = 0; k < f; ++k)
          data[(j * ts + t) * f + k] = static_cast<float>(stats.map(specs[j].at(start + t, k)));
    out.push_back({Tensor<float>({static_cast<std::int64_t>(m), 1, static_cast<std::int64_t>(ts),
                                  static_cast<std::int64_t>(f)},
                                 std::move(data)),
                   static_cast<int>(valid)});
  }
  return out;
}

// Inverse of the slicing pipeline: the enhanced [-1,1] slices (each holding
// slice_frames x (bins-1) values) are concatenated, unmapped, exponentiated,
// given the reference's Nyquist bin and phase, and resynthesized. The result
// stays at the normalized level unless `restore_gain` (the normalization gain)
// is given, in which case it is divided out.
inline Waveform reconstruct(std::span<const Tensor<float>> enhanced, const Stft& ref, const NormStats& stats,
                            std::size_t original_length, std::optional<double> restore_gain = std::nullopt) {
  DSSDRV_CHECK(ref.bins >= 2 && ref.frames > 0, ShapeError, "reference STFT is empty");
  stats.validate();
  const std::size_t f = ref.bins - 1;
  std::size_t total = 0;
  for (const auto& s : enhanced) {
    DSSDRV_CHECK(s.numel() % f == 0, ShapeError, "enhanced slice of ", s.numel(), " values is not a multiple of ",
                 f, " bins");
    total += s.numel() / f;
  }
  DSSDRV_CHECK(total >= ref.frames, ShapeError, "enhanced slices cover ", total, " frames, reference has ",
               ref.frames);
  DSSDRV_CHECK(enhanced.empty() || total - ref.frames < enhanced.back().numel() / f, ShapeError,
               "enhanced slices hold more than one slice of padding");
  Stft out = ref;
  std::size_t t = 0;
  for (const auto& s : enhanced) {
    const std::size_t rows = s.numel() / f;
    for (std::size_t r = 0; r < rows && t < ref.frames; ++r, ++t) {
      for (std::size_t k = 0; k < f; ++k) {
        const double mag = std::exp(stats.unmap(static_cast<double>(s[r * f + k])));
        out.at(t, k) = std::polar(mag, std::arg(ref.at(t, k)));
      }
      // Nyquist bin comes back from the reference untouched.
    }
  }
  Waveform w;
  w.samples = istft(out);
  w.samples.resize(original_length, 0.0);
  if (restore_gain) {
    DSSDRV_CHECK(*restore_gain > 0.0, NumericError, "restore gain must be positive");
    for (double& v : w.samples) v /= *restore_gain;
  }
  return w;
}

// Everything the network needs from one multi-microphone observation.
struct Observation {
  NormalizedSet normalized;
  std::size_t reference = 0;
  std::vector<Stft> stfts;
  std::vector<LogSpectrum> log_specs;
  std::size_t length = 0;
};

inline Observation analyze(std::span<const Waveform> mics) {
  DSSDRV_CHECK(!mics.empty(), ShapeError, "need at least one microphone signal");
  const auto n = mics[0].size();
  for (const auto& m : mics) {
    DSSDRV_CHECK(m.sample_rate == mics[0].sample_rate, FormatError, "mixed sample rates in one observation");
    DSSDRV_CHECK(m.size() == n, FormatError, "microphone signals differ in length");
  }
  Observation obs;
  obs.length = n;
  obs.normalized = rms_normalize(mics);
  obs.reference = select_phase_reference(obs.normalized.waves);
  for (const auto& w : obs.normalized.waves) {
    obs.stfts.push_back(stft(w));
    obs.log_specs.push_back(log_magnitude(obs.stfts.back()));
  }
  return obs;
}

}  // namespace dssdrv
