// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <map>
#include <numbers>
#include <random>

#include "dssdrv/acoustics.hpp"
#include "dssdrv/fft.hpp"
#include "dssdrv/signal.hpp"

namespace dssdrv {
namespace {

TEST(Room, SamplingRanges) {
  std::mt19937_64 rng(11);
  std::map<double, int> t60s;
  for (int i = 0; i < 10000; ++i) {
    auto r = sample_room(rng);
    const double lo = std::min(r.lx, r.ly), hi = std::max(r.lx, r.ly);
    ASSERT_GE(lo, 4.0);
    ASSERT_LE(lo, 7.0);
    ASSERT_GE(hi / lo, 1.0);
    ASSERT_LE(hi / lo, 1.5 + 1e-12);
    ASSERT_EQ(r.h, 2.7);
    ASSERT_GT(r.beta, 0.0);
    ASSERT_LT(r.beta, 1.0);
    ++t60s[r.t60];
  }
  ASSERT_EQ(t60s.size(), 4u);
  double chi2 = 0.0;
  for (auto [t, n] : t60s) {
    EXPECT_TRUE(t == 0.2 || t == 0.4 || t == 0.7 || t == 1.0);
    chi2 += (n - 2500.0) * (n - 2500.0) / 2500.0;
  }
  EXPECT_LT(chi2, 16.27);  // 3 dof, p = 0.001

  std::mt19937_64 a(5), b(5);
  auto ra = sample_room(a), rb = sample_room(b);
  EXPECT_EQ(ra.lx, rb.lx);
  EXPECT_EQ(ra.ly, rb.ly);
  EXPECT_EQ(ra.t60, rb.t60);
}

TEST(Room, EyringReflection) {
  // V = 81, S = 2 (30 + 13.5 + 16.2) = 119.4
  const double alpha = 1.0 - std::exp(-0.161 * 81.0 / (119.4 * 0.4));
  EXPECT_NEAR(eyring_reflection(5, 6, 2.7, 0.4), std::sqrt(1.0 - alpha), 1e-15);
  EXPECT_GT(eyring_reflection(5, 6, 2.7, 1.0), eyring_reflection(5, 6, 2.7, 0.2));
  // Direction-averaged image decay is slower than the diffuse one, so the
  // calibrated coefficient never exceeds Eyring's.
  for (double t60 : kT60Choices) {
    const double b = ism_reflection(5, 6, 2.7, t60);
    EXPECT_LE(b, eyring_reflection(5, 6, 2.7, t60));
    EXPECT_GT(b, 0.0);
    EXPECT_EQ(RoomSpec::make(5, 6, 2.7, t60).beta, b);
  }
}

TEST(Room, CriticalDistance) {
  EXPECT_NEAR(critical_distance(RoomSpec::make(5, 6, 2.7, 0.4)), 0.81111, 1e-4);
  EXPECT_NEAR(critical_distance(RoomSpec::make(5, 6, 2.7, 1.0)), 0.51300, 1e-4);
  EXPECT_NEAR(critical_distance(RoomSpec::make(10, 12, 2.7, 0.4)) / critical_distance(RoomSpec::make(5, 6, 2.7, 0.4)),
              2.0, 1e-12);
}

void expect_law(const RoomSpec& room, const ScenePlacement& p) {
  for (std::size_t i = 0; i < p.mics.size(); ++i) {
    const auto& m = p.mics[i];
    EXPECT_TRUE(inside_margin(room, m));
    EXPECT_EQ(m.z, kMicHeight);
    const double d = horizontal_distance(m, p.source);
    const auto r = mic_distance_range(p.classes[i], p.d_crit);
    EXPECT_GE(d, r.lo - 1e-9);
    EXPECT_LE(d, r.hi + 1e-9);
  }
  EXPECT_TRUE(inside_margin(room, p.source));
  EXPECT_EQ(p.source.z, kSourceHeight);
}

TEST(Placement, ScenarioLaws) {
  std::mt19937_64 rng(21);
  for (auto sc : {Scenario::kFar, Scenario::kNear, Scenario::kRandom, Scenario::kWinning}) {
    for (int i = 0; i < 200; ++i) {
      auto [room, p] = sample_scene(sc, 8, rng);
      ASSERT_EQ(p.mics.size(), 8u);
      expect_law(room, p);
      if (sc == Scenario::kNear)
        for (auto& m : p.mics) EXPECT_LE(horizontal_distance(m, p.source), p.d_crit);
      if (sc == Scenario::kWinning) {
        int near = 0, far = 0;
        for (auto c : p.classes) (c == MicClass::kNear ? near : far) += 1;
        EXPECT_EQ(near, 1);
        EXPECT_EQ(far, 7);
      }
    }
  }
}

TEST(Placement, FarClampInDeadRoom) {
  auto room = RoomSpec::make(7.0, 10.5, 2.7, 0.2);
  ASSERT_GT(2.0 * critical_distance(room), 3.0);
  auto r = mic_distance_range(MicClass::kFar, critical_distance(room));
  EXPECT_TRUE(r.clamped);
  EXPECT_DOUBLE_EQ(r.lo, 2.8);
  EXPECT_DOUBLE_EQ(r.hi, 3.0);
  std::mt19937_64 rng(3);
  auto p = sample_placement(room, Scenario::kFar, 4, rng);
  EXPECT_TRUE(p.far_clamped);
  expect_law(room, p);
}

TEST(Placement, Errors) {
  std::mt19937_64 rng(1);
  auto room = RoomSpec::make(5, 6, 2.7, 0.4);
  EXPECT_THROW(sample_placement(room, Scenario::kWinning, 1, rng), ConfigError);
  EXPECT_THROW(sample_placement(room, Scenario::kNear, 0, rng), ConfigError);
  // A room barely larger than the margin cannot host a far microphone.
  RoomSpec tiny{1.2, 1.2, 2.7, 0.4, 0.5};
  EXPECT_THROW(sample_placement(tiny, Scenario::kFar, 2, rng, 5, 5), PlacementError);
  EXPECT_THROW(parse_scenario("sideways"), ConfigError);
  EXPECT_EQ(parse_scenario("winning_ticket"), Scenario::kWinning);
}

TEST(Rir, FreeFieldDirectPath) {
  RoomSpec free{5, 6, 2.7, 0.4, 0.0};
  const Point3 src{1.0, 1.0, 1.75};
  // Integer-sample delay: the sinc collapses to one tap of 1 / (4 pi d).
  const double d = kSoundSpeed * 100.0 / kSampleRate;
  const Point3 mic{1.0 + d, 1.0, 1.75};
  auto h = simulate_rir(free, src, mic, kSampleRate, 400, false);
  EXPECT_NEAR(h[100], 1.0 / (4.0 * std::numbers::pi * d), 1e-12);
  for (std::size_t i = 0; i < h.size(); ++i)
    if (i != 100) ASSERT_NEAR(h[i], 0.0, 1e-12);

  // Fractional delay: peak within half a sample of d / c * fs.
  const double d2 = 1.2345;
  auto h2 = simulate_rir(free, src, {1.0, 1.0 + d2, 1.75}, kSampleRate, 400, false);
  std::size_t peak = 0;
  for (std::size_t i = 0; i < h2.size(); ++i)
    if (std::abs(h2[i]) > std::abs(h2[peak])) peak = i;
  EXPECT_LE(std::abs(static_cast<double>(peak) - d2 / kSoundSpeed * kSampleRate), 0.5);
  const double amp = 1.0 / (4.0 * std::numbers::pi * d2);
  EXPECT_LE(h2[peak], amp * (1.0 + 1e-12));
  EXPECT_GE(h2[peak], 0.6 * amp);

  // 1/d law at integer delays.
  auto far = simulate_rir(free, src, {1.0 + 2.0 * d, 1.0, 1.75}, kSampleRate, 400, false);
  EXPECT_NEAR(h[100] / far[200], 2.0, 1e-12);

  // The default high-pass leaves the direct pulse where it was.
  auto hp = simulate_rir(free, src, mic, kSampleRate, 400);
  std::size_t hp_peak = 0;
  for (std::size_t i = 0; i < hp.size(); ++i)
    if (std::abs(hp[i]) > std::abs(hp[hp_peak])) hp_peak = i;
  EXPECT_EQ(hp_peak, 100u);
  EXPECT_NEAR(hp[100], h[100], 1e-12);
}

TEST(Rir, DecayMatchesTargetT60) {
  auto room = RoomSpec::make(5, 6, 2.7, 0.6);
  auto h = simulate_rir(room, {1.5, 2.0, 1.75}, {3.2, 4.1, 1.6});
  ASSERT_EQ(h.size(), 9600u);
  const double t60 = schroeder_t60(h);
  EXPECT_NEAR(t60, 0.6, 0.25 * 0.6) << t60;
  // Other geometries and decay targets hold the same tolerance.
  const std::array<std::array<double, 4>, 4> rooms{{{4.0, 6.0, 2.7, 0.2}, {7.0, 7.5, 2.7, 0.4},
                                                    {4.5, 5.0, 2.7, 0.7}, {6.0, 8.5, 2.7, 1.0}}};
  for (auto [lx, ly, hh, t] : rooms) {
    auto r = RoomSpec::make(lx, ly, hh, t);
    auto ir = simulate_rir(r, {1.0, 1.2, 1.75}, {lx - 1.3, ly - 1.6, 1.6});
    EXPECT_NEAR(schroeder_t60(ir), t, 0.25 * t) << lx << "x" << ly;
  }
  auto again = simulate_rir(room, {1.5, 2.0, 1.75}, {3.2, 4.1, 1.6});
  EXPECT_EQ(h, again);
}

TEST(Rir, ReflectionsAddEnergy) {
  auto room = RoomSpec::make(5, 6, 2.7, 0.4);
  RoomSpec dry = room;
  dry.beta = 0.0;
  const Point3 s{2, 2, 1.75}, m{3, 3.5, 1.6};
  double e = 0, e0 = 0;
  for (double v : simulate_rir(room, s, m)) e += v * v;
  for (double v : simulate_rir(dry, s, m)) e0 += v * v;
  EXPECT_GT(e, e0);
  EXPECT_THROW(simulate_rir(room, s, s), ConfigError);
}

TEST(Schroeder, ClosedFormExponential) {
  for (double t60 : {0.25, 0.5, 0.9}) {
    std::vector<double> h(static_cast<std::size_t>(2.0 * t60 * kSampleRate));
    for (std::size_t n = 0; n < h.size(); ++n) h[n] = std::pow(10.0, -3.0 * n / (t60 * kSampleRate));
    EXPECT_NEAR(schroeder_t60(h), t60, 0.01 * t60);
  }
  std::vector<double> impulse(100, 0.0);
  impulse[0] = 1.0;
  EXPECT_THROW(schroeder_t60(impulse), NumericError);
  EXPECT_THROW(schroeder_t60(std::vector<double>(10, 0.0)), NumericError);
}

TEST(Schroeder, NoiseTail) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  const double tau = 0.08;
  std::vector<double> h(static_cast<std::size_t>(1.5 * kSampleRate));
  for (std::size_t n = 0; n < h.size(); ++n) h[n] = g(rng) * std::exp(-static_cast<double>(n) / kSampleRate / tau);
  // Energy falls as exp(-2 t / tau): 60 dB after 3 ln(10) tau.
  EXPECT_NEAR(schroeder_t60(h), 3.0 * std::log(10.0) * tau, 0.1 * 3.0 * std::log(10.0) * tau);
}

double band_power(const Stft& s, std::size_t k0, std::size_t k1) {
  double p = 0.0;
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t k = k0; k <= k1; ++k) p += std::norm(s.at(t, k));
  return p;
}

TEST(Noise, SnrAndSpectralShape) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 0.2);
  std::vector<double> target(1 << 17);
  for (auto& v : target) v = g(rng);
  NoiseSpec spec;
  auto n = gen_noise(target.size(), target, spec, rng);
  EXPECT_NEAR(snr_db(target, n), 20.0, 1e-9);

  // |H(1)| / |H(-1)| = (1 + a) / (1 - a) = 19; powers differ by 361.
  const double a = spec.ar_coefficient;
  EXPECT_NEAR((1 + a) / (1 - a), 19.0, 1e-12);
  auto s = stft(n);
  const double ratio = band_power(s, 0, 2) / band_power(s, 254, 256);
  EXPECT_NEAR(ratio, 361.0, 0.15 * 361.0);

  NoiseSpec white{20.0, 0.0};
  auto w = gen_noise(target.size(), target, white, rng);
  auto sw = stft(w);
  EXPECT_NEAR(band_power(sw, 0, 2) / band_power(sw, 254, 256), 1.0, 0.15);
  EXPECT_NEAR(band_power(sw, 10, 60) / band_power(sw, 180, 230), 1.0, 0.1);

  EXPECT_THROW(gen_noise(10, std::vector<double>(10, 0.0), spec, rng), NumericError);
  EXPECT_THROW(gen_noise(10, target, NoiseSpec{20.0, 1.0}, rng), ConfigError);
  EXPECT_THROW(gen_noise(0, target, spec, rng), ConfigError);
}

TEST(Convolution, FftMatchesDirect) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  for (auto [na, nb] : {std::pair{1, 1}, {7, 3}, {100, 37}, {513, 260}}) {
    std::vector<double> a(na), b(nb);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    std::vector<double> direct(a.size() + b.size() - 1, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j) direct[i + j] += a[i] * b[j];
    auto f = fft_convolve(a, b);
    ASSERT_EQ(f.size(), direct.size());
    double num = 0, den = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      num += (f[i] - direct[i]) * (f[i] - direct[i]);
      den += direct[i] * direct[i];
    }
    EXPECT_LT(std::sqrt(num / den), 1e-8);
  }
}

}  // namespace
}  // namespace dssdrv
