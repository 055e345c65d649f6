// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Self-verification checks shared by `dssdrv self-test` and the acceptance
// binary. Each check returns a verdict plus the measured quantity.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dssdrv/checkpoint.hpp"
#include "dssdrv/dataset.hpp"
#include "dssdrv/grad_check.hpp"
#include "dssdrv/metrics.hpp"
#include "dssdrv/nn.hpp"
#include "dssdrv/train.hpp"
#include "dssdrv/wpe.hpp"

namespace dssdrv {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string measured;
  double seconds = 0.0;
};

struct VerifyOptions {
  bool quick = false;  // smaller sample counts where the criterion allows it
  int jobs = 1;
  std::filesystem::path work_dir;  // scratch space; a temp dir when empty
  std::ostream* log = nullptr;     // progress lines for long checks
  // End-to-end run.
  int e2e_utterances = 50;
  int e2e_held_out = 10;
  int e2e_steps = 4000;
};

namespace verify_detail {

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename T>
Tensor<T> permute_set(const Tensor<T>& x, const std::vector<int>& perm) {
  const auto b = x.dim(0), m = x.dim(1);
  const auto inner = static_cast<std::int64_t>(x.numel()) / (b * m);
  auto out = Tensor<T>::zeros(x.shape());
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t j = 0; j < m; ++j)
      std::copy_n(x.data().data() + (n * m + perm[static_cast<std::size_t>(j)]) * inner, inner,
                  out.data().data() + (n * m + j) * inner);
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  return d;
}

inline std::filesystem::path scratch(const VerifyOptions& o, const std::string& name) {
  std::filesystem::path base = o.work_dir;
  if (base.empty()) {
    std::random_device rd;
    base = std::filesystem::temp_directory_path() / ("dssdrv-verify-" + std::to_string(rd()));
  }
  auto p = base / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void note(const VerifyOptions& o, const std::string& s) {
  if (o.log) *o.log << "  " << s << std::endl;
}

// Two microphones at a fixed spot in a 5 x 6 x 2.7 m room.
inline std::vector<Waveform> reverberant_pair(const std::vector<double>& clean, double t60) {
  auto room = RoomSpec::make(5, 6, 2.7, t60);
  const Point3 src{1.6, 2.1, 1.75};
  std::vector<Waveform> out;
  for (Point3 m : {Point3{3.4, 3.6, 1.6}, Point3{3.6, 3.5, 1.6}}) {
    auto y = fft_convolve(clean, simulate_rir(room, src, m));
    y.resize(clean.size());
    out.push_back({std::move(y), kSampleRate});
  }
  return out;
}

inline std::vector<double> reverberate_for_metrics(const std::vector<double>& x) {
  auto y = fft_convolve(x, simulate_rir(RoomSpec::make(5, 6, 2.7, 0.4), {1.5, 2.0, 1.75}, {3.0, 3.5, 1.6}));
  y.resize(x.size());
  return y;
}

}  // namespace verify_detail

// 1. Output unchanged under 20 random orders of a 5-element set.
inline CheckResult check_permutation_invariance(const VerifyOptions& = {}) {
  using namespace verify_detail;
  CheckResult r{1, "permutation invariance"};
  std::mt19937_64 rng(101);
  DssUNet<float> net(UNetConfig::tiny(), 102);
  auto x = Tensor<float>::uniform({1, 5, 1, 32, 256}, rng, -1.0f, 1.0f);
  double worst = 0.0;
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    net.set_mode(mode);
    NoGradGuard guard;
    const auto ref = net.forward(x);
    std::vector<int> perm{0, 1, 2, 3, 4};
    for (int trial = 0; trial < 20; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      worst = std::max(worst, max_abs_diff(net.forward(permute_set(x, perm)), ref));
    }
  }
  r.passed = worst <= 1e-5;
  r.measured = fmt("max |dy| %.2e over 20 permutations x {train, eval} (limit 1e-5)", worst);
  return r;
}

// 2. A mean-aggregation checkpoint runs on M in {1,2,4,8} without change.
inline CheckResult check_variable_set_size(const VerifyOptions& = {}) {
  using namespace verify_detail;
  CheckResult r{2, "variable set size"};
  DssUNet<float> source(UNetConfig::tiny(), 201);
  const NormStats stats{-12.0, 3.0};
  const auto bytes = checkpoint_bytes(source, stats, 201);
  auto loaded = parse_checkpoint<float>(bytes, "memory");
  auto rng = derive_rng(202, 0, 2);
  const auto clean = synth_speech(1.0, rng);
  auto room = RoomSpec::make(5, 6, 2.7, 0.4);
  bool ok = true;
  std::string shapes;
  for (int m : {1, 2, 4, 8}) {
    std::vector<Waveform> mics;
    for (int j = 0; j < m; ++j) {
      auto y = fft_convolve(clean, simulate_rir(room, {1.5, 2.0, 1.75}, {2.5 + 0.1 * j, 3.0, 1.6}));
      y.resize(clean.size());
      mics.push_back({std::move(y), kSampleRate});
    }
    NoGradGuard guard;
    loaded.net.set_mode(Mode::kEval);
    auto x = Tensor<float>::zeros({1, m, 1, 32, 256});
    const auto y = loaded.net.forward(x);
    const auto w = enhance(loaded.net, loaded.stats, mics);
    ok = ok && y.shape() == Shape{1, 1, 32, 256} && w.size() == clean.size();
    shapes += (shapes.empty() ? "" : " ") + std::to_string(m) + ":" + shape_str(y.shape());
  }
  const bool unchanged = checkpoint_bytes(loaded.net, loaded.stats, 201) == bytes;
  r.passed = ok && unchanged;
  r.measured = "shapes " + shapes + (unchanged ? ", parameters and buffers byte-identical" : ", parameters CHANGED");
  return r;
}

// 3. Analytic gradients against central differences in double precision.
inline CheckResult check_gradients(const VerifyOptions& o = {}) {
  using namespace verify_detail;
  CheckResult r{3, "gradient fidelity"};
  std::mt19937_64 rng(301);
  GradCheckOptions opts{.coords_per_tensor = o.quick ? 40u : 120u, .seed = 302, .confirm_eps = 1e-7};
  std::vector<std::pair<std::string, GradCheckResult>> errs;
  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> ps,
                 GradCheckOptions go) { errs.emplace_back(name, grad_check(f, std::move(ps), go)); };

  auto x4 = Tensor<double>::uniform({2, 2, 8, 8}, rng, -1.0, 1.0);
  auto w = Tensor<double>::uniform({3, 2, 4, 4}, rng, -0.5, 0.5);
  auto b = Tensor<double>::uniform({3}, rng, -0.5, 0.5);
  auto t4 = Tensor<double>::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
  run("conv2d", [&] { return mse(conv2d<double>(x4, w, b, 2, Pad4{}), t4); }, {x4, w, b}, opts);
  auto wt = Tensor<double>::uniform({3, 2, 4, 4}, rng, -0.5, 0.5);
  auto bt = Tensor<double>::uniform({2}, rng, -0.5, 0.5);
  auto tt = Tensor<double>::uniform({2, 2, 8, 8}, rng, -1.0, 1.0);
  run("conv_transpose2d", [&] { return mse(conv_transpose2d<double>(t4, wt, bt), tt); }, {t4, wt, bt}, opts);
  auto gm = Tensor<double>::uniform({2}, rng, 0.5, 1.5), be = Tensor<double>::uniform({2}, rng, -0.5, 0.5);
  BatchNormState<double> st(2);
  auto tb = Tensor<double>::uniform({2, 2, 8, 8}, rng, -1.0, 1.0);
  run("batch_norm/train", [&] { return mse(batch_norm(x4, gm, be, st, Mode::kTrain), tb); }, {x4, gm, be}, opts);
  run("batch_norm/eval", [&] { return mse(batch_norm(x4, gm, be, st, Mode::kEval), tb); }, {x4, gm, be}, opts);
  auto x5 = Tensor<double>::uniform({1, 3, 2, 4, 4}, rng, -1.0, 1.0);
  auto a5 = Tensor<double>::uniform({1, 1, 2, 4, 4}, rng, -1.0, 1.0);
  run("relu", [&] { return sum(tanh(relu(x5))); }, {x5}, opts);
  run("leaky_relu", [&] { return sum(tanh(leaky_relu(x5))); }, {x5}, opts);
  run("tanh", [&] { return sum(tanh(x5)); }, {x5}, opts);
  run("set_sum", [&] { return sum(tanh(set_reduce(x5, SetReduce::kSum))); }, {x5}, opts);
  run("set_mean", [&] { return sum(tanh(set_reduce(x5, SetReduce::kMean))); }, {x5}, opts);
  run("set_max", [&] { return sum(tanh(set_reduce(x5, SetReduce::kMax))); }, {x5}, opts);
  run("broadcast_add", [&] { return sum(tanh(add_set_broadcast(x5, a5))); }, {x5, a5}, opts);
  run("concat", [&] { return sum(tanh(concat(x5, a5, 1))); }, {x5, a5}, opts);
  for (auto agg : {Aggregation::kSum, Aggregation::kMean}) {
    for (auto dir : {Direction::kDown, Direction::kUp}) {
      std::mt19937_64 lrng(303);
      DssLayer<double> layer(dir, 2, 3, agg, lrng);
      ParameterSet<double> set;
      layer.collect("l", set);
      std::vector<Tensor<double>> ps{x5};
      for (auto& p : set.params) ps.push_back(*p.tensor);
      run(std::string("dss_") + (dir == Direction::kDown ? "down_" : "up_") + to_string(agg),
          [&] { return sum(tanh(layer.forward(x5, Mode::kTrain))); }, ps, opts);
    }
  }
  auto p = Tensor<double>::uniform({2, 5, 6}, rng, -1.0, 1.0), z = Tensor<double>::uniform({2, 5, 6}, rng, -1.0, 1.0);
  run("grad_loss", [&] { return grad_loss(p, z, {5, 3}); }, {p, z}, opts);
  {
    UNetConfig c;
    c.depth = o.quick ? 3 : 4;
    c.base_width = 2;
    c.t_slice = c.freq_bins = 1 << c.depth;
    DssUNet<double> net(c, 304);
    auto x = Tensor<double>::uniform({2, 3, 1, c.t_slice, c.freq_bins}, rng, -1.0, 1.0);
    auto target = Tensor<double>::uniform({2, 1, c.t_slice, c.freq_bins}, rng, -1.0, 1.0);
    std::vector<Tensor<double>> ps{x};
    for (auto& q : net.parameters().params) ps.push_back(*q.tensor);
    run("dss_unet+grad_loss", [&] { return grad_loss(net.forward(x), target); }, ps,
        {.coords_per_tensor = o.quick ? 4u : 24u, .seed = 305, .confirm_eps = 1e-7});
  }
  const auto worst = std::max_element(errs.begin(), errs.end(), [](const auto& a, const auto& b) {
    return a.second.max_rel_error < b.second.max_rel_error;
  });
  const auto& w0 = worst->second;
  note(o, fmt("worst coordinate: tensor %zu index %zu analytic %.6e numeric %.6e", w0.worst_param, w0.worst_index,
              w0.worst_analytic, w0.worst_numeric));
  r.passed = w0.max_rel_error < 1e-4;
  r.measured = fmt("%zu checks, max rel error %.2e at %s (limit 1e-4)", errs.size(), w0.max_rel_error,
                   worst->first.c_str());
  return r;
}

// 4. The tiny network memorizes four fixed 32 x 32 slices.
inline CheckResult check_overfit(const VerifyOptions& o = {}) {
  using namespace verify_detail;
  CheckResult r{4, "overfit sanity"};
  const auto dir = scratch(o, "overfit");
  DataConfig dc;
  dc.count = 4;
  dc.mics = 3;
  dc.seed = 5;
  dc.synth_seconds = 1.2;
  dc.jobs = std::max(1, o.jobs);
  std::ostringstream quiet;
  generate_dataset(dc, {}, dir, quiet);
  const auto data = prepare_training_data(read_manifest(dir / "manifest.jsonl"), 0.0);
  TrainConfig tc;
  tc.set_sizes = {2};
  tc.batch = 4;
  tc.seed = 11;
  tc.adam.lr = 5e-3;
  Trainer trainer(UNetConfig::tiny(32), tc, data.stats);
  std::vector<SliceChoice> picks;
  for (const auto& u : data.train) picks.push_back({&u, {0, 1}, most_active_start(u, 32, 32)});
  const auto batch = make_batch(picks, data.stats, 32, 32);
  const double first = trainer.step(batch);
  double last = first;
  int steps = 1;
  for (; steps < 500 && last >= 0.05 * first; ++steps) {
    last = trainer.step(batch);
    if (steps % 100 == 0) note(o, fmt("overfit step %d: loss %.5f (%.3f of initial)", steps, last, last / first));
  }
  std::filesystem::remove_all(dir);
  r.passed = last < 0.05 * first;
  r.measured = fmt("GradLoss %.5f -> %.5f (%.1f%% of initial, limit 5%%) after %d Adam steps", first, last,
                   100.0 * last / first, steps);
  return r;
}

// 5. STFT analysis/synthesis round trip.
inline CheckResult check_stft(const VerifyOptions& = {}) {
  using namespace verify_detail;
  CheckResult r{5, "STFT perfect reconstruction"};
  std::mt19937_64 rng(501);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(kSampleRate);
  for (auto& v : x) v = g(rng);
  const auto y = istft(stft(x));
  double num = 0.0, den = 0.0;
  for (std::size_t i = kFftSize; i + kFftSize < x.size(); ++i) {
    num += (y[i] - x[i]) * (y[i] - x[i]);
    den += x[i] * x[i];
  }
  const double err = std::sqrt(num / den);
  r.passed = err < 1e-6;
  r.measured = fmt("interior relative L2 error %.2e (limit 1e-6)", err);
  return r;
}

// 6. Direct-path delay and reverberation time of simulated responses.
inline CheckResult check_rir(const VerifyOptions& = {}) {
  using namespace verify_detail;
  CheckResult r{6, "RIR correctness"};
  RoomSpec free{5, 6, 2.7, 0.4, 0.0};
  const Point3 src{1.0, 1.0, 1.75};
  double worst_delay = 0.0;
  for (double d : {0.5, 1.2345, 2.71}) {
    auto h = simulate_rir(free, src, {1.0 + d * 0.6, 1.0 + d * 0.8, 1.75}, kSampleRate, 800, false);
    std::size_t peak = 0;
    for (std::size_t i = 0; i < h.size(); ++i)
      if (std::abs(h[i]) > std::abs(h[peak])) peak = i;
    worst_delay = std::max(worst_delay, std::abs(static_cast<double>(peak) - d / kSoundSpeed * kSampleRate));
  }
  bool t60_ok = true;
  std::string t60s;
  for (double t : kT60Choices) {
    auto room = RoomSpec::make(5, 6, 2.7, t);
    const double est = schroeder_t60(simulate_rir(room, {1.5, 2.0, 1.75}, {3.2, 4.1, 1.6}));
    t60_ok = t60_ok && std::abs(est - t) <= 0.25 * t;
    t60s += fmt("%s%.1f->%.3f", t60s.empty() ? "" : " ", t, est);
  }
  r.passed = worst_delay <= 1.0 && t60_ok;
  r.measured = fmt("direct-path error %.2f samples (limit 1); T60 ", worst_delay) + t60s + " s (limit +-25%)";
  return r;
}

// 7. WPE on a two-channel reverberant utterance.
inline CheckResult check_wpe(const VerifyOptions& o = {}) {
  using namespace verify_detail;
  CheckResult r{7, "WPE effectiveness"};
  auto rng = derive_rng(22, 0, 2);
  const auto clean = synth_speech(4.0, rng);
  const auto mics = reverberant_pair(clean, 0.6);
  WpeConfig cfg;
  cfg.taps = 60;
  cfg.jobs = std::max(1, o.jobs);
  WpeResult res;
  const auto out = wpe_waveforms(mics, cfg, &res);
  double before = 1e9, after = 1e9;
  for (std::size_t m = 0; m < mics.size(); ++m) {
    before = std::min(before, score_pair(clean, mics[m].samples).cd);
    after = std::min(after, score_pair(clean, out[m].samples).cd);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < res.objective.size(); ++i)
    monotone = monotone && res.objective[i] <= res.objective[i - 1] + 1e-6 * std::abs(res.objective[i - 1]);
  r.passed = before - after >= 0.3 && monotone;
  r.measured = fmt("best-channel CD %.3f -> %.3f dB (gain %.3f, limit 0.3); objective %s over %zu iterations", before,
                   after, before - after, monotone ? "non-increasing" : "INCREASED", res.objective.size() - 1);
  return r;
}

// 8. Metric identities and clamps.
inline CheckResult check_metrics(const VerifyOptions& = {}) {
  using namespace verify_detail;
  CheckResult r{8, "metric oracles"};
  auto rng = derive_rng(801, 0, 2);
  const auto x = synth_speech(2.0, rng);
  const double cd0 = cepstral_distance(x, x), fw0 = fwsegsnr(x, x);
  // Three sharp resonances against white noise.
  std::mt19937_64 nrng(802);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> c(32000), n(32000);
  for (auto& v : c) v = 0.01 * g(nrng);
  for (auto& v : n) v = 0.05 * g(nrng);
  for (double fc : {500.0, 1500.0, 2500.0}) {
    const double rr = 0.98, w = 2.0 * std::numbers::pi * fc / kSampleRate;
    std::vector<double> y(c.size(), 0.0);
    for (std::size_t i = 2; i < c.size(); ++i) y[i] = c[i] + 2 * rr * std::cos(w) * y[i - 1] - rr * rr * y[i - 2];
    c = std::move(y);
  }
  const double raw = cepstral_distance(c, n, std::numeric_limits<double>::infinity()), capped = cepstral_distance(c, n);
  auto y = reverberate_for_metrics(x);
  double gain_dev = 0.0;
  for (double gain : {1e-3, 0.37, 8.0}) {
    auto xs = x, ys = y;
    for (auto& v : xs) v *= gain;
    for (auto& v : ys) v *= gain;
    gain_dev = std::max({gain_dev, std::abs(cepstral_distance(xs, ys) - cepstral_distance(x, y)),
                         std::abs(fwsegsnr(xs, ys) - fwsegsnr(x, y))});
  }
  r.passed = cd0 == 0.0 && fw0 == 35.0 && capped == 10.0 && raw > 10.0 && gain_dev <= 1e-9;
  r.measured = fmt("CD(x,x)=%.2f FWSegSNR(x,x)=%.2f; noise CD %.2f (unclamped %.2f); common-gain deviation %.1e dB",
                   cd0, fw0, capped, raw, gain_dev);
  return r;
}

// 9. Sampled scenes obey the scenario laws; noisy scenes hit 20 dB.
inline CheckResult check_dataset_laws(const VerifyOptions& o = {}) {
  using namespace verify_detail;
  CheckResult r{9, "dataset-law conformance"};
  const int per = o.quick ? 200 : 1000;
  const int mics = 8;
  std::size_t violations = 0, clamped = 0;
  auto fail = [&](bool bad) { violations += bad ? 1 : 0; };
  for (auto sc : {Scenario::kFar, Scenario::kNear, Scenario::kRandom, Scenario::kWinning}) {
    auto rng = derive_rng(901, static_cast<std::uint64_t>(sc), 1);
    for (int i = 0; i < per; ++i) {
      auto [room, p] = sample_scene(sc, mics, rng);
      const double lo = std::min(room.lx, room.ly), hi = std::max(room.lx, room.ly);
      fail(lo < 4.0 || lo > 7.0 || hi / lo > 1.5 + 1e-12 || room.h != kRoomHeight);
      fail(std::find(kT60Choices.begin(), kT60Choices.end(), room.t60) == kT60Choices.end());
      fail(std::abs(p.d_crit - critical_distance(room)) > 1e-12);
      fail(!inside_margin(room, p.source) || p.source.z != kSourceHeight);
      fail(p.mics.size() != static_cast<std::size_t>(mics));
      int near = 0, far = 0;
      for (std::size_t k = 0; k < p.mics.size(); ++k) {
        const auto& m = p.mics[k];
        fail(!inside_margin(room, m) || m.z != kMicHeight);
        const double d = horizontal_distance(m, p.source);
        switch (p.classes[k]) {
          case MicClass::kNear:
            ++near;
            fail(d < kMinMicDistance - 1e-9 || d > p.d_crit + 1e-9);
            break;
          case MicClass::kFar: {
            ++far;
            const double lo_far = 2.0 * p.d_crit < kMaxMicDistance ? 2.0 * p.d_crit : kMaxMicDistance - 0.2;
            clamped += 2.0 * p.d_crit >= kMaxMicDistance;
            fail(d < lo_far - 1e-9 || d > kMaxMicDistance + 1e-9);
            break;
          }
          case MicClass::kRandom: fail(d < kMinMicDistance - 1e-9 || d > kMaxMicDistance + 1e-9); break;
        }
      }
      switch (sc) {
        case Scenario::kFar: fail(far != mics); break;
        case Scenario::kNear: fail(near != mics); break;
        case Scenario::kRandom: fail(near + far != 0); break;
        case Scenario::kWinning: fail(near != 1 || far != mics - 1); break;
      }
    }
  }
  // Realized SNR of rendered noisy scenes.
  DataConfig dc;
  dc.noisy = true;
  dc.mics = 4;
  double worst_snr = 0.0;
  auto srng = derive_rng(902, 0, 2);
  const auto clean = synth_speech(1.0, srng);
  for (int i = 0; i < (o.quick ? 3 : 8); ++i) {
    auto rng = derive_rng(903, static_cast<std::uint64_t>(i), 1);
    auto [room, p] = sample_scene(Scenario::kWinning, dc.mics, rng);
    const auto scene = render_scene(clean, room, p, dc, derive_seed(903, static_cast<std::uint64_t>(i), 3));
    for (double s : scene.snr_db) worst_snr = std::max(worst_snr, std::abs(s - 20.0));
  }
  r.passed = violations == 0 && worst_snr <= 0.5;
  r.measured = fmt("%d scenes x 4 scenarios, %zu violations, %zu clamped far mics; SNR max |dev| %.3f dB (limit 0.5)",
                   per, violations, clamped, worst_snr);
  return r;
}

// 10. Train the tiny model on near-scenario data; held-out CD must improve.
inline CheckResult check_end_to_end(const VerifyOptions& o = {}) {
  using namespace verify_detail;
  CheckResult r{10, "end-to-end directional"};
  const auto dir = scratch(o, "e2e");
  DataConfig dc;
  dc.scenario = Scenario::kNear;
  dc.mics = 4;
  dc.count = o.e2e_utterances;
  dc.seed = 1001;
  dc.jobs = std::max(1, o.jobs);
  std::ostringstream quiet;
  note(o, fmt("generating %d near-scenario utterances", dc.count));
  auto records = generate_dataset(dc, {}, dir / "data", quiet);
  const auto held = static_cast<std::size_t>(o.e2e_held_out);
  DSSDRV_CHECK(records.size() > held, DataError, "end-to-end run needs more than ", held, " utterances");
  const std::vector<ManifestRecord> train_recs(records.begin(), records.end() - static_cast<std::ptrdiff_t>(held));
  const std::vector<ManifestRecord> test_recs(records.end() - static_cast<std::ptrdiff_t>(held), records.end());
  auto data = prepare_training_data(train_recs, 0.1);
  TrainConfig tc;
  tc.set_sizes = {2, 4};
  tc.steps = o.e2e_steps;
  tc.checkpoint_every = std::max(1, o.e2e_steps / 10);
  tc.seed = 1002;
  Trainer trainer(UNetConfig::tiny(), tc, data.stats);
  note(o, fmt("training %d steps on %zu utterances (%zu for validation)", tc.steps, data.train.size(),
              data.val.size()));
  const auto summary = trainer.run(data, dir / "ckpt");
  for (const auto& [step, v] : summary.val) note(o, fmt("step %llu: val GradLoss %.5f", (unsigned long long)step, v));
  auto best = load_checkpoint<float>(dir / "ckpt" / "best.ckpt");
  const auto out = dir / "enhanced";
  std::filesystem::create_directories(out);
  for (const auto& rec : test_recs) {
    std::vector<Waveform> mics;
    for (const auto& p : rec.reverberant) mics.push_back(read_wav(p));
    write_wav(out / (rec.id + ".wav"), enhance(best.net, best.stats, mics));
  }
  const auto rev = evaluate_manifest(test_recs, std::nullopt, dc.jobs);
  const auto enh = evaluate_manifest(test_recs, out, dc.jobs);
  if (o.log) {
    print_report(rev, *o.log);
    print_report(enh, *o.log);
  }
  std::filesystem::remove_all(dir);
  r.passed = enh.overall.cd < rev.overall.cd;
  r.measured = fmt("held-out mean CD %.3f (reverberant) -> %.3f dB (enhanced), FWSegSNR %.2f -> %.2f dB, %zu test "
                   "utterances, %d steps",
                   rev.overall.cd, enh.overall.cd, rev.overall.fwsegsnr, enh.overall.fwsegsnr, test_recs.size(),
                   tc.steps);
  return r;
}

using CheckFn = CheckResult (*)(const VerifyOptions&);

inline const std::vector<CheckFn>& all_checks() {
  static const std::vector<CheckFn> v{check_permutation_invariance, check_variable_set_size, check_gradients,
                                      check_overfit, check_stft, check_rir, check_wpe, check_metrics,
                                      check_dataset_laws, check_end_to_end};
  return v;
}

// Runs the checks with the given ids, printing one line per check:
//   PASS [n] name: measured (seconds)
// Exceptions count as failures.
inline std::vector<CheckResult> run_checks(const std::vector<int>& ids, const VerifyOptions& o, std::ostream& os) {
  std::vector<CheckResult> out;
  for (int id : ids) {
    DSSDRV_CHECK(id >= 1 && id <= static_cast<int>(all_checks().size()), ConfigError, "no check numbered ", id);
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = all_checks()[static_cast<std::size_t>(id - 1)](o);
    } catch (const std::exception& e) {
      r.id = id;
      r.name = "check " + std::to_string(id);
      r.passed = false;
      r.measured = std::string("error: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    os << (r.passed ? "PASS" : "FAIL") << " [" << r.id << "] " << r.name << ": " << r.measured << " ("
       << verify_detail::fmt("%.1f", r.seconds) << " s)" << std::endl;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dssdrv
