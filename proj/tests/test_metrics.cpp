// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <limits>
#include <sstream>

#include "dssdrv/metrics.hpp"

namespace dssdrv {
namespace {

std::vector<double> speech(std::uint64_t seed, double seconds = 2.0) {
  auto rng = derive_rng(seed, 0, 2);
  return synth_speech(seconds, rng);
}

std::vector<double> reverberate(const std::vector<double>& x, double t60, const Point3& src, const Point3& mic) {
  auto room = RoomSpec::make(5, 6, 2.7, t60);
  auto y = fft_convolve(x, simulate_rir(room, src, mic));
  y.resize(x.size());
  return y;
}

std::vector<double> white(std::size_t n, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

TEST(CepstralDistance, IdentityAndSymmetry) {
  auto x = speech(1), y = speech(2);
  EXPECT_EQ(cepstral_distance(x, x), 0.0);
  const double a = cepstral_distance(x, y), b = cepstral_distance(y, x);
  EXPECT_GT(a, 0.5);
  // Symmetric formula, but silent-frame selection follows the first argument.
  auto xn = x, yn = y;
  for (auto& v : xn) v += 1e-3;
  for (auto& v : yn) v += 1e-3;
  EXPECT_NEAR(cepstral_distance(xn, yn), cepstral_distance(yn, xn), 1e-12);
  EXPECT_GT(b, 0.5);
}

TEST(CepstralDistance, ScalarLoopOracle) {
  // One frame, evaluated with a direct O(N^2) DFT and inverse DFT.
  auto x = white(400, 3, 1.0), y = white(400, 4, 1.0);
  for (std::size_t i = 0; i < 400; ++i) y[i] = 0.7 * x[i] + 0.3 * y[i];
  auto cep = [](const std::vector<double>& s) {
    std::vector<double> logmag(512);
    for (int k = 0; k < 512; ++k) {
      std::complex<double> acc = 0.0;
      for (int n = 0; n < 400; ++n) {
        const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / 400.0);
        acc += s[static_cast<std::size_t>(n)] * w * std::polar(1.0, -2.0 * std::numbers::pi * k * n / 512.0);
      }
      logmag[static_cast<std::size_t>(k)] = std::log(std::abs(acc));
    }
    std::vector<double> c(25);
    for (int q = 0; q <= 24; ++q) {
      double acc = 0.0;
      for (int k = 0; k < 512; ++k) acc += logmag[static_cast<std::size_t>(k)] * std::cos(2.0 * std::numbers::pi * k * q / 512.0);
      c[static_cast<std::size_t>(q)] = acc / 512.0;
    }
    return c;
  };
  auto a = cep(x), b = cep(y);
  double s = 0.0;
  for (int k = 1; k <= 24; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  const double expect = std::min(10.0, 10.0 / std::log(10.0) * std::sqrt(2.0 * s));
  EXPECT_NEAR(cepstral_distance(x, y), expect, 1e-9);
}

TEST(CepstralDistance, NoiseHitsCeiling) {
  // Three sharp resonances against white noise: every frame is far apart.
  auto x = white(32000, 5, 0.01);
  for (double fc : {500.0, 1500.0, 2500.0}) {
    const double r = 0.98, w = 2.0 * std::numbers::pi * fc / 16000.0;
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t i = 2; i < x.size(); ++i) y[i] = x[i] + 2 * r * std::cos(w) * y[i - 1] - r * r * y[i - 2];
    x = std::move(y);
  }
  auto n = white(x.size(), 6, 0.05);
  const double raw = cepstral_distance(x, n, std::numeric_limits<double>::infinity());
  EXPECT_GT(raw, 13.0) << raw;
  EXPECT_NEAR(cepstral_distance(x, n), 10.0, 1e-12);
  EXPECT_NEAR(cepstral_distance(x, n, 0.0), 0.0, 0.0);
}

TEST(CepstralDistance, MoreReverbIsWorse) {
  auto x = speech(7);
  const Point3 s{1.5, 2.0, 1.75}, m{3.5, 4.2, 1.6};
  EXPECT_GT(cepstral_distance(x, reverberate(x, 0.7, s, m)), cepstral_distance(x, reverberate(x, 0.2, s, m)));
}

TEST(FwSegSnr, IdentityNoiseAndAsymmetry) {
  auto x = speech(8);
  EXPECT_EQ(fwsegsnr(x, x), 35.0);
  // 0 dB white noise.
  auto y = x;
  auto n = white(x.size(), 9, rms(x));
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += n[i];
  EXPECT_LT(fwsegsnr(x, y), 10.0);
  EXPECT_NE(fwsegsnr(x, y), fwsegsnr(y, x));
}

TEST(FwSegSnr, FarReverbIsWorseThanNear) {
  auto x = speech(10);
  auto room_far = RoomSpec::make(5, 6, 2.7, 1.0);
  auto room_near = RoomSpec::make(5, 6, 2.7, 0.2);
  const Point3 s{2.0, 2.0, 1.75};
  auto far = fft_convolve(x, simulate_rir(room_far, s, {4.3, 4.0, 1.6}));
  auto near = fft_convolve(x, simulate_rir(room_near, s, {2.3, 2.2, 1.6}));
  far.resize(x.size());
  near.resize(x.size());
  EXPECT_LT(score_pair(x, far).fwsegsnr, score_pair(x, near).fwsegsnr);
  EXPECT_GT(score_pair(x, far).cd, score_pair(x, near).cd);
}

TEST(Metrics, CommonGainInvariance) {
  auto x = speech(11);
  auto y = reverberate(x, 0.4, {1.5, 2.0, 1.75}, {3.0, 3.5, 1.6});
  for (double g : {1e-3, 0.37, 8.0}) {
    auto xs = x, ys = y;
    for (auto& v : xs) v *= g;
    for (auto& v : ys) v *= g;
    EXPECT_NEAR(cepstral_distance(xs, ys), cepstral_distance(x, y), 1e-9);
    EXPECT_NEAR(fwsegsnr(xs, ys), fwsegsnr(x, y), 1e-9);
  }
  // A gain on one side only: FWSegSNR moves, CD does not (it lands in c_0).
  auto ys = y;
  for (auto& v : ys) v *= 0.1;
  EXPECT_GT(std::abs(fwsegsnr(x, ys) - fwsegsnr(x, y)), 0.1) << fwsegsnr(x, ys) << " " << fwsegsnr(x, y);
  EXPECT_NEAR(cepstral_distance(x, ys), cepstral_distance(x, y), 1e-9);
}

TEST(Metrics, Errors) {
  std::vector<double> shortsig(300, 0.1);
  EXPECT_THROW(cepstral_distance(shortsig, shortsig), ShapeError);
  std::vector<double> silent(4000, 0.0);
  EXPECT_THROW(cepstral_distance(silent, silent), NumericError);
  EXPECT_THROW(fwsegsnr(silent, silent), NumericError);
}

TEST(EvaluateManifest, ReferenceOutputsAndReverberant) {
  auto dir = fs::temp_directory_path() / "dssdrv_eval";
  fs::remove_all(dir);
  DataConfig cfg;
  cfg.mics = 2;
  cfg.count = 3;
  cfg.synth_seconds = 1.0;
  cfg.scenario = Scenario::kNear;
  std::ostringstream log;
  auto recs = generate_dataset(cfg, {}, dir / "data", log);

  // Clean signals as the "system output" score perfectly.
  fs::create_directories(dir / "clean_sys");
  for (const auto& r : recs) fs::copy_file(r.clean, dir / "clean_sys" / (r.id + ".wav"));
  auto rep = evaluate_manifest(recs, dir / "clean_sys");
  EXPECT_EQ(rep.rows.size(), 3u);
  EXPECT_NEAR(rep.overall.cd, 0.0, 1e-12);
  EXPECT_NEAR(rep.overall.fwsegsnr, 35.0, 1e-12);

  // Multi-channel outputs: the best channel by CD is reported.
  fs::create_directories(dir / "multi");
  for (const auto& r : recs) {
    fs::copy_file(r.reverberant[0], dir / "multi" / (r.id + "_ch0.wav"));
    fs::copy_file(r.clean, dir / "multi" / (r.id + "_ch1.wav"));
  }
  fs::remove(dir / "multi" / (recs[2].id + "_ch0.wav"));
  fs::remove(dir / "multi" / (recs[2].id + "_ch1.wav"));
  auto multi = evaluate_manifest(recs, dir / "multi", 2);
  ASSERT_EQ(multi.rows.size(), 2u);
  EXPECT_EQ(multi.missing, std::vector<std::string>{recs[2].id});
  EXPECT_EQ(multi.rows[0].best_channel, 1);
  EXPECT_NEAR(multi.rows[0].cd, 0.0, 1e-12);

  auto rev = evaluate_manifest(recs, std::nullopt);
  EXPECT_EQ(rev.rows.size(), 3u);
  EXPECT_GT(rev.overall.cd, 0.5);
  EXPECT_EQ(rev.by_scenario.count("near"), 1u);
  auto again = evaluate_manifest(recs, std::nullopt, 3);
  EXPECT_EQ(report_json(rev).dump(), report_json(again).dump());
  std::ostringstream table;
  print_report(rev, table);
  EXPECT_NE(table.str().find("FWSegSNR"), std::string::npos);

  fs::create_directories(dir / "empty");
  EXPECT_THROW(evaluate_manifest(recs, dir / "empty"), DataError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace dssdrv
