// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Shoebox rooms, scene placement for the four microphone scenarios, an
// image-source RIR simulator, Schroeder decay analysis and AR(1) noise.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dssdrv/error.hpp"
#include "dssdrv/wav.hpp"

namespace dssdrv {

inline constexpr double kSoundSpeed = 343.0;
inline constexpr double kRoomHeight = 2.7;
inline constexpr double kSourceHeight = 1.75;
inline constexpr double kMicHeight = 1.6;
inline constexpr double kWallMargin = 0.5;
inline constexpr double kMinMicDistance = 0.2;
inline constexpr double kMaxMicDistance = 3.0;
inline constexpr std::array<double, 4> kT60Choices{0.2, 0.4, 0.7, 1.0};

struct Point3 {
  double x = 0, y = 0, z = 0;
};

inline double horizontal_distance(const Point3& a, const Point3& b) { return std::hypot(a.x - b.x, a.y - b.y); }
inline double distance(const Point3& a, const Point3& b) {
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z));
}

// Eyring: mean absorption 1 - exp(-0.161 V / (S T60)), reflection sqrt(1 - alpha).
inline double eyring_reflection(double lx, double ly, double h, double t60) {
  const double volume = lx * ly * h;
  const double surface = 2.0 * (lx * ly + lx * h + ly * h);
  const double alpha = 1.0 - std::exp(-0.161 * volume / (surface * t60));
  return std::sqrt(1.0 - alpha);
}

// Image-source energy arriving from direction u after travelling r metres
// has met about r * g(u) walls, g(u) = sum_i |u_i| / L_i. Averaging the
// decay beta^(2 r g) over the sphere gives an energy decay curve whose shape
// in tau = -2 ln(beta) c t does not depend on beta, so one pass yields the
// tau-domain T60 and beta follows in closed form. With g constant this is
// exactly Eyring; in flat rooms the grazing paths decay slower and beta ends
// up lower than the Eyring value.
inline double ism_reflection(double lx, double ly, double h, double t60) {
  constexpr int kGrid = 16;
  std::vector<double> g;
  g.reserve(kGrid * kGrid);
  for (int i = 0; i < kGrid; ++i) {
    const double uz = (i + 0.5) / kGrid;
    const double rho = std::sqrt(1.0 - uz * uz);
    for (int j = 0; j < kGrid; ++j) {
      const double phi = (j + 0.5) / kGrid * std::numbers::pi / 2.0;
      g.push_back(rho * std::cos(phi) / lx + rho * std::sin(phi) / ly + uz / h);
    }
  }
  // Remaining energy past tau, in dB relative to the total.
  double total = 0.0;
  for (double v : g) total += 1.0 / v;
  auto edc_db = [&](double tau) {
    double e = 0.0;
    for (double v : g) e += std::exp(-v * tau) / v;
    return 10.0 * std::log10(e / total);
  };
  auto crossing = [&](double level) {
    double lo = 0.0, hi = 1.0;
    while (edc_db(hi) > level) hi *= 2.0;
    for (int it = 0; it < 40; ++it) {
      const double mid = 0.5 * (lo + hi);
      (edc_db(mid) > level ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  };
  const double t0 = crossing(-5.0), t1 = crossing(-25.0);
  constexpr int kPoints = 64;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int k = 0; k < kPoints; ++k) {
    const double x = t0 + (t1 - t0) * k / (kPoints - 1), y = edc_db(x);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (kPoints * sxy - sx * sy) / (kPoints * sxx - sx * sx);
  const double tau60 = -60.0 / slope;
  return std::exp(-tau60 / (2.0 * kSoundSpeed * t60));
}

struct RoomSpec {
  double lx = 5.0, ly = 6.0, h = kRoomHeight;
  double t60 = 0.4;
  double beta = 0.0;  // uniform wall reflection coefficient

  static RoomSpec make(double lx, double ly, double h, double t60) {
    return {lx, ly, h, t60, ism_reflection(lx, ly, h, t60)};
  }
  double volume() const { return lx * ly * h; }
};

template <typename Rng>
RoomSpec sample_room(Rng& rng) {
  std::uniform_real_distribution<double> small(4.0, 7.0), aspect(1.0, 1.5);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(kT60Choices.size()) - 1);
  const double a = small(rng);
  const double b = a * aspect(rng);
  const double t60 = kT60Choices[static_cast<std::size_t>(pick(rng))];
  return RoomSpec::make(a, b, kRoomHeight, t60);
}

// Diffuse-field critical distance 0.057 sqrt(V / T60).
inline double critical_distance(const RoomSpec& room) { return 0.057 * std::sqrt(room.volume() / room.t60); }

enum class Scenario { kFar, kNear, kRandom, kWinning };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kFar: return "far";
    case Scenario::kNear: return "near";
    case Scenario::kRandom: return "random";
    case Scenario::kWinning: return "winning";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& s) {
  if (s == "far") return Scenario::kFar;
  if (s == "near") return Scenario::kNear;
  if (s == "random") return Scenario::kRandom;
  if (s == "winning" || s == "winning_ticket") return Scenario::kWinning;
  throw ConfigError("unknown scenario '" + s + "' (expected far|near|random|winning)");
}

enum class MicClass { kNear, kFar, kRandom };

struct DistanceRange {
  double lo = 0, hi = 0;
  bool clamped = false;
};

// Far range is [2 d_crit, 3]; when 2 d_crit >= 3 it collapses to [2.8, 3].
inline DistanceRange mic_distance_range(MicClass cls, double d_crit) {
  switch (cls) {
    case MicClass::kNear: return {kMinMicDistance, d_crit, false};
    case MicClass::kRandom: return {kMinMicDistance, kMaxMicDistance, false};
    case MicClass::kFar: {
      const double lo = 2.0 * d_crit;
      if (lo < kMaxMicDistance) return {lo, kMaxMicDistance, false};
      return {std::min(lo, kMaxMicDistance) - 0.2, kMaxMicDistance, true};
    }
  }
  return {};
}

struct ScenePlacement {
  Point3 source;
  std::vector<Point3> mics;
  std::vector<MicClass> classes;
  Scenario scenario = Scenario::kRandom;
  double d_crit = 0.0;
  bool far_clamped = false;
};

inline bool inside_margin(const RoomSpec& room, const Point3& p) {
  return p.x >= kWallMargin && p.x <= room.lx - kWallMargin && p.y >= kWallMargin &&
         p.y <= room.ly - kWallMargin && p.z >= kWallMargin && p.z <= room.h - kWallMargin;
}

// Source uniform inside the wall margin; each microphone at a sampled
// horizontal distance and uniform azimuth, rejection-sampled until it also
// respects the margin. Throws PlacementError when the budget runs out.
template <typename Rng>
ScenePlacement sample_placement(const RoomSpec& room, Scenario scenario, int mics, Rng& rng,
                                int source_attempts = 200, int mic_attempts = 200) {
  DSSDRV_CHECK(mics >= 1, ConfigError, "a scene needs at least one microphone");
  DSSDRV_CHECK(scenario != Scenario::kWinning || mics >= 2, ConfigError,
               "the winning-ticket scenario needs at least two microphones");
  ScenePlacement p;
  p.scenario = scenario;
  p.d_crit = critical_distance(room);
  std::vector<MicClass> classes(static_cast<std::size_t>(mics));
  switch (scenario) {
    case Scenario::kFar: std::fill(classes.begin(), classes.end(), MicClass::kFar); break;
    case Scenario::kNear: std::fill(classes.begin(), classes.end(), MicClass::kNear); break;
    case Scenario::kRandom: std::fill(classes.begin(), classes.end(), MicClass::kRandom); break;
    case Scenario::kWinning: {
      std::fill(classes.begin(), classes.end(), MicClass::kFar);
      std::uniform_int_distribution<int> which(0, mics - 1);
      classes[static_cast<std::size_t>(which(rng))] = MicClass::kNear;
      break;
    }
  }
  std::uniform_real_distribution<double> sx(kWallMargin, room.lx - kWallMargin), sy(kWallMargin, room.ly - kWallMargin);
  std::uniform_real_distribution<double> azimuth(0.0, 2.0 * std::numbers::pi);
  for (int attempt = 0; attempt < source_attempts; ++attempt) {
    p.source = {sx(rng), sy(rng), kSourceHeight};
    p.mics.clear();
    p.far_clamped = false;
    bool ok = true;
    for (auto cls : classes) {
      const auto range = mic_distance_range(cls, p.d_crit);
      p.far_clamped = p.far_clamped || range.clamped;
      std::uniform_real_distribution<double> dist(range.lo, range.hi);
      bool placed = false;
      for (int k = 0; k < mic_attempts && !placed; ++k) {
        const double r = dist(rng), th = azimuth(rng);
        Point3 m{p.source.x + r * std::cos(th), p.source.y + r * std::sin(th), kMicHeight};
        if (inside_margin(room, m)) {
          p.mics.push_back(m);
          placed = true;
        }
      }
      if (!placed) {
        ok = false;
        break;
      }
    }
    if (ok) {
      p.classes = classes;
      return p;
    }
  }
  throw PlacementError("could not place " + std::to_string(mics) + " microphones for scenario " +
                       to_string(scenario));
}

// Draws rooms until a placement succeeds.
template <typename Rng>
std::pair<RoomSpec, ScenePlacement> sample_scene(Scenario scenario, int mics, Rng& rng, int room_attempts = 50) {
  for (int i = 0; i < room_attempts; ++i) {
    auto room = sample_room(rng);
    try {
      return {room, sample_placement(room, scenario, mics, rng)};
    } catch (const PlacementError&) {
    }
  }
  throw PlacementError("scene sampling exhausted its room budget");
}

namespace detail {

inline constexpr int kFracTaps = 81;
inline constexpr int kFracHalf = kFracTaps / 2;
inline constexpr int kFracSteps = 1024;

// Hann-windowed sinc taps for fractional offsets f in [0,1) at 1/1024 steps:
// row[j] is the response at sample (round_base + j - 40) for a delay of
// round_base + f.
inline const std::vector<double>& fractional_delay_table() {
  static const std::vector<double> table = [] {
    std::vector<double> t(static_cast<std::size_t>((kFracSteps + 1) * kFracTaps));
    const double half_width = kFracHalf + 0.5;
    for (int s = 0; s <= kFracSteps; ++s) {
      const double f = static_cast<double>(s) / kFracSteps;
      for (int j = 0; j < kFracTaps; ++j) {
        const double x = static_cast<double>(j - kFracHalf) - f;
        const double win = 0.5 * (1.0 + std::cos(std::numbers::pi * x / half_width));
        const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        t[static_cast<std::size_t>(s * kFracTaps + j)] = win * sinc;
      }
    }
    return t;
  }();
  return table;
}

struct AxisImage {
  double offset;  // image coordinate minus receiver coordinate
  int reflections;
};

inline std::vector<AxisImage> axis_images(double source, double receiver, double length, int order, double reach) {
  std::vector<AxisImage> out;
  for (int n = -order; n <= order; ++n)
    for (int u = 0; u <= 1; ++u) {
      const double img = (1 - 2 * u) * source + 2.0 * n * length;
      const double off = img - receiver;
      if (std::abs(off) <= reach) out.push_back({off, std::abs(n - u) + std::abs(n)});
    }
  return out;
}

}  // namespace detail

inline int image_order(const RoomSpec& room) {
  return static_cast<int>(std::ceil(kSoundSpeed * room.t60 / std::min({room.lx, room.ly, room.h}))) + 1;
}

// Image-source RIR. Each image adds beta^reflections / (4 pi d) at delay
// d / c * fs through an 81-tap Hann-windowed sinc. Default length is
// ceil(T60 * fs) samples.
// Two-pole 100 Hz high-pass customary for image-method RIRs; removes the
// DC build-up that all-positive image amplitudes produce.
inline void allen_berkley_highpass(std::vector<double>& h, int fs) {
  const double w = 2.0 * std::numbers::pi * 100.0 / fs;
  const double r1 = std::exp(-w), b1 = 2.0 * r1 * std::cos(w), b2 = -r1 * r1, a1 = -(1.0 + r1);
  double y1 = 0.0, y2 = 0.0;
  for (auto& v : h) {
    const double y0 = b1 * y1 + b2 * y2 + v;
    v = y0 + a1 * y1 + r1 * y2;
    y2 = y1;
    y1 = y0;
  }
}

inline std::vector<double> simulate_rir(const RoomSpec& room, const Point3& src, const Point3& mic,
                                        int fs = kSampleRate, std::optional<std::size_t> length = std::nullopt,
                                        bool high_pass = true) {
  const double d0 = distance(src, mic);
  DSSDRV_CHECK(d0 > 1e-6, ConfigError, "source and microphone coincide");
  const std::size_t len = length.value_or(static_cast<std::size_t>(std::ceil(room.t60 * fs)));
  std::vector<double> h(len, 0.0);
  if (len == 0) return h;
  const int order = image_order(room);
  const double reach = kSoundSpeed * (static_cast<double>(len) + detail::kFracHalf + 1) / fs;
  const auto xs = detail::axis_images(src.x, mic.x, room.lx, order, reach);
  const auto ys = detail::axis_images(src.y, mic.y, room.ly, order, reach);
  const auto zs = detail::axis_images(src.z, mic.z, room.h, order, reach);
  const int max_refl = 6 * order + 2;
  std::vector<double> beta_pow(static_cast<std::size_t>(max_refl + 1));
  for (int i = 0; i <= max_refl; ++i) beta_pow[static_cast<std::size_t>(i)] = std::pow(room.beta, i);
  const auto& table = detail::fractional_delay_table();
  const double reach2 = reach * reach;
  const double samples_per_metre = fs / kSoundSpeed;
  const auto ilen = static_cast<std::ptrdiff_t>(len);
  for (const auto& ax : xs) {
    const double dx2 = ax.offset * ax.offset;
    if (dx2 > reach2) continue;
    for (const auto& ay : ys) {
      const double dxy2 = dx2 + ay.offset * ay.offset;
      if (dxy2 > reach2) continue;
      for (const auto& az : zs) {
        const double d2 = dxy2 + az.offset * az.offset;
        if (d2 > reach2) continue;
        const double gain = beta_pow[static_cast<std::size_t>(ax.reflections + ay.reflections + az.reflections)];
        if (gain == 0.0) continue;
        const double d = std::sqrt(d2);
        const double amp = gain / (4.0 * std::numbers::pi * d);
        const double delay = d * samples_per_metre;
        const double base = std::floor(delay);
        const auto step = static_cast<std::size_t>(std::lround((delay - base) * detail::kFracSteps));
        const double* taps = table.data() + step * detail::kFracTaps;
        const std::ptrdiff_t first = static_cast<std::ptrdiff_t>(base) - detail::kFracHalf;
        const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, -first);
        const std::ptrdiff_t j1 = std::min<std::ptrdiff_t>(detail::kFracTaps, ilen - first);
        for (std::ptrdiff_t j = j0; j < j1; ++j) h[static_cast<std::size_t>(first + j)] += amp * taps[j];
      }
    }
  }
  if (high_pass) allen_berkley_highpass(h, fs);
  return h;
}

// Energy decay curve in dB (Schroeder backward integration).
inline std::vector<double> energy_decay_db(std::span<const double> rir) {
  std::vector<double> edc(rir.size());
  double acc = 0.0;
  for (std::size_t i = rir.size(); i-- > 0;) {
    acc += rir[i] * rir[i];
    edc[i] = acc;
  }
  const double total = acc;
  for (auto& e : edc) e = e > 0.0 ? 10.0 * std::log10(e / total) : -std::numeric_limits<double>::infinity();
  return edc;
}

// T60 from a least-squares fit of the decay curve between -5 and -25 dB,
// extrapolated to -60 dB.
inline double schroeder_t60(std::span<const double> rir, int fs = kSampleRate) {
  double energy = 0.0;
  for (double v : rir) energy += v * v;
  DSSDRV_CHECK(energy > 0.0, NumericError, "Schroeder analysis of a silent response");
  const auto edc = energy_decay_db(rir);
  std::size_t start = edc.size(), stop = edc.size();
  for (std::size_t i = 0; i < edc.size(); ++i) {
    if (start == edc.size() && edc[i] <= -5.0) start = i;
    if (edc[i] <= -25.0) {
      stop = i;
      break;
    }
  }
  DSSDRV_CHECK(start < edc.size() && stop < edc.size() && stop >= start + 2, NumericError,
               "response does not decay through the -5..-25 dB range");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(stop - start + 1);
  for (std::size_t i = start; i <= stop; ++i) {
    const double x = static_cast<double>(i), y = edc[i];
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);  // dB per sample
  DSSDRV_CHECK(slope < 0.0, NumericError, "energy decay curve is not decreasing");
  return -60.0 / slope / fs;
}

struct NoiseSpec {
  double snr_db = 20.0;
  double ar_coefficient = 0.9;

  void validate() const {
    DSSDRV_CHECK(std::abs(ar_coefficient) < 1.0, ConfigError, "AR(1) coefficient must satisfy |a| < 1");
    DSSDRV_CHECK(std::isfinite(snr_db), ConfigError, "SNR must be finite");
  }
};

inline double snr_db(std::span<const double> signal, std::span<const double> noise) {
  double ps = 0, pn = 0;
  for (double v : signal) ps += v * v;
  for (double v : noise) pn += v * v;
  return 10.0 * std::log10((ps / signal.size()) / (pn / noise.size()));
}

// White Gaussian noise through 1 / (1 - a z^-1), scaled so the power ratio
// against `target` equals the requested SNR.
template <typename Rng>
std::vector<double> gen_noise(std::size_t n, std::span<const double> target, const NoiseSpec& spec, Rng& rng) {
  DSSDRV_CHECK(n > 0, ConfigError, "noise length must be positive");
  spec.validate();
  double ps = 0.0;
  for (double v : target) ps += v * v;
  DSSDRV_CHECK(!target.empty() && ps > 0.0, NumericError, "SNR is undefined for a silent target");
  ps /= static_cast<double>(target.size());
  std::normal_distribution<double> white(0.0, 1.0);
  std::vector<double> noise(n);
  double prev = 0.0;
  for (auto& v : noise) {
    prev = white(rng) + spec.ar_coefficient * prev;
    v = prev;
  }
  double pn = 0.0;
  for (double v : noise) pn += v * v;
  pn /= static_cast<double>(n);
  const double g = std::sqrt(ps / (pn * std::pow(10.0, spec.snr_db / 10.0)));
  for (auto& v : noise) v *= g;
  return noise;
}

}  // namespace dssdrv
