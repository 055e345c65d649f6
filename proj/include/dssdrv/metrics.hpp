// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Cepstral distance and frequency-weighted segmental SNR, plus batch
// scoring of a manifest against enhanced outputs or the raw reverberant
// microphones.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dssdrv/dataset.hpp"
#include "dssdrv/error.hpp"
#include "dssdrv/fft.hpp"
#include "dssdrv/signal.hpp"
#include "dssdrv/wav.hpp"

namespace dssdrv {

inline constexpr std::size_t kMetricFrame = 400;  // 25 ms
inline constexpr std::size_t kMetricHop = 160;    // 10 ms
inline constexpr std::size_t kMetricFft = 512;
inline constexpr int kCepstralOrder = 24;
inline constexpr int kMelBands = 25;
inline constexpr double kSilenceFloor = 1e-6;
inline constexpr double kCdMax = 10.0;
inline constexpr double kSnrMin = -10.0, kSnrMax = 35.0;

namespace detail {

struct FrameSpectra {
  std::vector<std::vector<double>> ref_mag, est_mag;
  std::vector<bool> keep;
};

// Magnitude spectra of aligned frames of both signals; frames whose
// reference energy falls below the silence floor are marked for skipping.
inline FrameSpectra frame_spectra(std::span<const double> ref, std::span<const double> est) {
  const std::size_t n = std::min(ref.size(), est.size());
  DSSDRV_CHECK(n >= kMetricFrame, ShapeError, "metric inputs shorter than one 25 ms frame");
  const std::size_t frames = (n - kMetricFrame) / kMetricHop + 1;
  std::vector<double> win(kMetricFrame);
  for (std::size_t i = 0; i < kMetricFrame; ++i)
    win[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / kMetricFrame);
  RealFft fft(kMetricFft);
  FrameSpectra out;
  std::vector<double> energy(frames), buf(kMetricFrame);
  std::vector<Complex> spec;
  auto mag = [&](std::span<const double> x, std::size_t start) {
    for (std::size_t i = 0; i < kMetricFrame; ++i) buf[i] = x[start + i] * win[i];
    fft.forward(buf, spec);
    std::vector<double> m(spec.size());
    for (std::size_t k = 0; k < spec.size(); ++k) m[k] = std::abs(spec[k]);
    return m;
  };
  double mean_energy = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    double e = 0.0;
    for (std::size_t i = 0; i < kMetricFrame; ++i) e += ref[t * kMetricHop + i] * ref[t * kMetricHop + i];
    energy[t] = e;
    mean_energy += e;
  }
  mean_energy /= static_cast<double>(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const bool keep = mean_energy > 0.0 && energy[t] >= kSilenceFloor * mean_energy;
    out.keep.push_back(keep);
    out.ref_mag.push_back(keep ? mag(ref, t * kMetricHop) : std::vector<double>{});
    out.est_mag.push_back(keep ? mag(est, t * kMetricHop) : std::vector<double>{});
  }
  return out;
}

// Real cepstrum c_0..c_order of a magnitude spectrum. The log floor is
// relative to the frame peak so a gain moves only c_0.
inline std::vector<double> real_cepstrum(const std::vector<double>& mag, int order, RealFft& fft) {
  const double peak = *std::max_element(mag.begin(), mag.end());
  const double floor = std::max(peak * 1e-10, 1e-300);
  std::vector<Complex> logmag(mag.size());
  for (std::size_t k = 0; k < mag.size(); ++k) logmag[k] = std::log(std::max(mag[k], floor));
  std::vector<double> c;
  fft.inverse(logmag, c);
  c.resize(static_cast<std::size_t>(order) + 1);
  return c;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Triangular mel filterbank over the kMetricFft/2+1 bins, 0 Hz to Nyquist.
inline const std::vector<std::vector<double>>& mel_bank() {
  static const std::vector<std::vector<double>> bank = [] {
    const std::size_t bins = kMetricFft / 2 + 1;
    const double top = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kMelBands + 2);
    for (int i = 0; i < kMelBands + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(top * i / (kMelBands + 1));
    std::vector<std::vector<double>> b(kMelBands, std::vector<double>(bins, 0.0));
    for (int j = 0; j < kMelBands; ++j) {
      const double lo = edges[static_cast<std::size_t>(j)], mid = edges[static_cast<std::size_t>(j) + 1],
                   hi = edges[static_cast<std::size_t>(j) + 2];
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * kSampleRate / kMetricFft;
        if (f > lo && f < hi) b[static_cast<std::size_t>(j)][k] = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      }
    }
    return b;
  }();
  return bank;
}

}  // namespace detail

// Mean over non-silent frames of (10 / ln 10) sqrt(2 sum_{k=1..24} (c_k - c'_k)^2),
// each frame clamped to [0, ceiling].
inline double cepstral_distance(std::span<const double> ref, std::span<const double> est, double ceiling = kCdMax) {
  const auto fs = detail::frame_spectra(ref, est);
  RealFft fft(kMetricFft);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < fs.keep.size(); ++t) {
    if (!fs.keep[t]) continue;
    const auto a = detail::real_cepstrum(fs.ref_mag[t], kCepstralOrder, fft);
    const auto b = detail::real_cepstrum(fs.est_mag[t], kCepstralOrder, fft);
    double s = 0.0;
    for (int k = 1; k <= kCepstralOrder; ++k) s += (a[static_cast<std::size_t>(k)] - b[static_cast<std::size_t>(k)]) *
                                                   (a[static_cast<std::size_t>(k)] - b[static_cast<std::size_t>(k)]);
    total += std::clamp(10.0 / std::log(10.0) * std::sqrt(2.0 * s), 0.0, ceiling);
    ++used;
  }
  DSSDRV_CHECK(used > 0, NumericError, "cepstral distance: every reference frame is silent");
  return total / static_cast<double>(used);
}

// Mean over non-silent frames of sum_j W_j SNR_j / sum_j W_j with mel-band
// magnitudes B_j, W_j = B_j^0.2 and SNR_j = 10 log10(B_j^2 / (B_j - B'_j)^2)
// clamped to [-10, 35].
inline double fwsegsnr(std::span<const double> ref, std::span<const double> est) {
  const auto fs = detail::frame_spectra(ref, est);
  const auto& bank = detail::mel_bank();
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < fs.keep.size(); ++t) {
    if (!fs.keep[t]) continue;
    double num = 0.0, den = 0.0;
    for (const auto& tri : bank) {
      double b = 0.0, be = 0.0;
      for (std::size_t k = 0; k < tri.size(); ++k) {
        b += tri[k] * fs.ref_mag[t][k];
        be += tri[k] * fs.est_mag[t][k];
      }
      const double diff = b - be;
      double snr = kSnrMax;
      if (diff != 0.0) snr = b > 0.0 ? 10.0 * std::log10(b * b / (diff * diff)) : kSnrMin;
      snr = std::clamp(snr, kSnrMin, kSnrMax);
      const double w = std::pow(b, 0.2);
      num += w * snr;
      den += w;
    }
    total += den > 0.0 ? num / den : kSnrMin;
    ++used;
  }
  DSSDRV_CHECK(used > 0, NumericError, "FWSegSNR: every reference frame is silent");
  return total / static_cast<double>(used);
}

// Scales a copy to unit RMS; evaluation compares signals at equal energy so
// output loudness conventions do not leak into FWSegSNR.
inline std::vector<double> unit_energy(std::span<const double> x) {
  const double r = rms(x);
  DSSDRV_CHECK(r > 0.0, NumericError, "cannot energy-normalize a silent signal");
  std::vector<double> out(x.begin(), x.end());
  for (auto& v : out) v /= r;
  return out;
}

struct MetricPair {
  double cd = 0.0, fwsegsnr = 0.0;
};

inline MetricPair score_pair(std::span<const double> ref, std::span<const double> est) {
  const std::size_t n = std::min(ref.size(), est.size());
  auto r = unit_energy(ref.first(n));
  auto e = unit_energy(est.first(n));
  return {cepstral_distance(r, e), fwsegsnr(r, e)};
}

enum class ChannelRule { kMean, kBestByCd };

struct UtteranceScore {
  std::string id, scenario;
  double cd = 0.0, fwsegsnr = 0.0;
  int channels = 1;
  int best_channel = -1;  // set when the best of several outputs was picked
};

struct MetricSummary {
  std::size_t count = 0;
  double cd = 0.0, fwsegsnr = 0.0;
};

struct MetricReport {
  std::string system;
  std::vector<UtteranceScore> rows;
  std::vector<std::string> missing;
  std::map<std::string, MetricSummary> by_scenario;
  MetricSummary overall;
};

// Enhanced outputs for record `id` in `dir`: either <id>.wav, or one file per
// channel <id>_ch<m>.wav (multi-output systems such as WPE).
inline std::vector<fs::path> find_outputs(const fs::path& dir, const std::string& id) {
  if (fs::exists(dir / (id + ".wav"))) return {dir / (id + ".wav")};
  std::vector<fs::path> out;
  for (int m = 0;; ++m) {
    auto p = dir / (id + "_ch" + std::to_string(m) + ".wav");
    if (!fs::exists(p)) break;
    out.push_back(p);
  }
  return out;
}

inline void summarize(MetricReport& rep) {
  rep.by_scenario.clear();
  rep.overall = {};
  for (const auto& r : rep.rows) {
    auto& s = rep.by_scenario[r.scenario];
    s.count++, s.cd += r.cd, s.fwsegsnr += r.fwsegsnr;
    rep.overall.count++, rep.overall.cd += r.cd, rep.overall.fwsegsnr += r.fwsegsnr;
  }
  auto finish = [](MetricSummary& s) {
    if (s.count) s.cd /= static_cast<double>(s.count), s.fwsegsnr /= static_cast<double>(s.count);
  };
  for (auto& [k, s] : rep.by_scenario) finish(s);
  finish(rep.overall);
}

// Scores every record against its clean reference. With `outputs` the
// enhanced files are scored (best channel by CD for multi-output systems);
// without, the reverberant microphones are scored and averaged.
inline MetricReport evaluate_manifest(const std::vector<ManifestRecord>& records,
                                      const std::optional<fs::path>& outputs, int jobs = 1) {
  DSSDRV_CHECK(!records.empty(), DataError, "nothing to evaluate: empty manifest");
  MetricReport rep;
  rep.system = outputs ? outputs->filename().string() : "reverberant";
  if (outputs) DSSDRV_CHECK(fs::is_directory(*outputs), DataError, "outputs directory ", outputs->string(), " not found");
  std::vector<std::optional<UtteranceScore>> scores(records.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      const auto& rec = records[i];
      std::vector<fs::path> files = outputs ? find_outputs(*outputs, rec.id) : rec.reverberant;
      if (files.empty()) continue;
      const auto clean = read_wav(rec.clean);
      UtteranceScore s;
      s.id = rec.id;
      s.scenario = to_string(rec.placement.scenario) + (rec.noisy ? "/noisy" : "");
      s.channels = static_cast<int>(files.size());
      std::vector<MetricPair> per;
      for (const auto& f : files) {
        auto w = read_wav(f);
        DSSDRV_CHECK(w.sample_rate == clean.sample_rate, FormatError, f.string(), ": sample rate differs from the reference");
        per.push_back(score_pair(clean.samples, w.samples));
      }
      if (outputs && per.size() > 1) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < per.size(); ++c)
          if (per[c].cd < per[best].cd) best = c;
        s.cd = per[best].cd, s.fwsegsnr = per[best].fwsegsnr, s.best_channel = static_cast<int>(best);
      } else {
        for (const auto& p : per) s.cd += p.cd, s.fwsegsnr += p.fwsegsnr;
        s.cd /= static_cast<double>(per.size()), s.fwsegsnr /= static_cast<double>(per.size());
      }
      scores[i] = s;
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (scores[i]) rep.rows.push_back(*scores[i]);
    else rep.missing.push_back(records[i].id);
  }
  DSSDRV_CHECK(!rep.rows.empty(), DataError, "no outputs match the manifest records");
  summarize(rep);
  return rep;
}

inline void print_report(const MetricReport& rep, std::ostream& os) {
  char line[128];
  std::snprintf(line, sizeof line, "%-20s %6s %10s %14s\n", "scenario", "n", "CD(dB)-", "FWSegSNR(dB)+");
  os << "system: " << rep.system << '\n' << line;
  for (const auto& [name, s] : rep.by_scenario) {
    std::snprintf(line, sizeof line, "%-20s %6zu %10.2f %14.2f\n", name.c_str(), s.count, s.cd, s.fwsegsnr);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-20s %6zu %10.2f %14.2f\n", "all", rep.overall.count, rep.overall.cd,
                rep.overall.fwsegsnr);
  os << line;
  if (!rep.missing.empty()) os << rep.missing.size() << " record(s) had no output and were skipped\n";
}

inline Json report_json(const MetricReport& rep) {
  Json rows = Json::array();
  for (const auto& r : rep.rows) {
    Json j{{"id", r.id}, {"scenario", r.scenario}, {"cd", r.cd}, {"fwsegsnr", r.fwsegsnr}, {"channels", r.channels}};
    if (r.best_channel >= 0) j["best_channel"] = r.best_channel;
    rows.push_back(j);
  }
  Json agg = Json::object();
  for (const auto& [name, s] : rep.by_scenario) agg[name] = {{"count", s.count}, {"cd", s.cd}, {"fwsegsnr", s.fwsegsnr}};
  return {{"system", rep.system},
          {"records", rows},
          {"by_scenario", agg},
          {"overall", {{"count", rep.overall.count}, {"cd", rep.overall.cd}, {"fwsegsnr", rep.overall.fwsegsnr}}},
          {"missing", rep.missing}};
}

}  // namespace dssdrv
