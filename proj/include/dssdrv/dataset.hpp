// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Reverberant multi-microphone corpora: scene simulation per utterance,
// a speech-like synthetic source for corpus-free runs, and the JSON Lines
// manifest that ties clean and reverberant files together.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dssdrv/acoustics.hpp"
#include "dssdrv/error.hpp"
#include "dssdrv/fft.hpp"
#include "dssdrv/wav.hpp"
#include "json.hpp"

namespace dssdrv {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr const char* kManifestSchema = "biurev/1";

// Independent stream per (seed, index, purpose).
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose) {
  auto rng = derive_rng(seed, index, purpose);
  return rng();
}

namespace detail {

// Two-pole resonator at (freq, bandwidth) with unit gain at DC, so a cascade
// keeps its overall level while the formant peaks stand out.
struct Resonator {
  double a1 = 0, a2 = 0, gain = 1, y1 = 0, y2 = 0;
  Resonator(double freq, double bw, int fs) { retune(freq, bw, fs); }
  // Changes the coefficients, keeps the state.
  void retune(double freq, double bw, int fs) {
    const double r = std::exp(-std::numbers::pi * bw / fs);
    a1 = 2.0 * r * std::cos(2.0 * std::numbers::pi * freq / fs);
    a2 = -r * r;
    gain = 1.0 - a1 - a2;
  }
  double operator()(double x) {
    const double y = gain * x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

}  // namespace detail

// Speech-like test signal built like a cascade formant synthesizer: voiced
// syllables (pulse train with a gliding pitch, -12 dB/oct glottal shaping,
// +6 dB/oct radiation, four cascaded formants), high-passed fricative bursts
// and pauses. RMS is 0.05.
template <typename Rng>
std::vector<double> synth_speech(double seconds, Rng& rng, int fs = kSampleRate) {
  DSSDRV_CHECK(seconds > 0.0, ConfigError, "synthetic utterance length must be positive");
  const auto n = static_cast<std::size_t>(std::ceil(seconds * fs));
  std::vector<double> out(n, 0.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double f0_base = 100.0 + 120.0 * u(rng);
  const double rho = std::exp(-2.0 * std::numbers::pi * 100.0 / fs);  // glottal low-pass pole
  std::size_t pos = static_cast<std::size_t>(0.05 * fs * u(rng));
  std::vector<double> seg;
  // Each segment is rendered separately and scaled to its own RMS target
  // (fricatives 10-20 dB under vowels).
  auto place = [&](double target) {
    double e = 0.0;
    for (double v : seg) e += v * v;
    if (e <= 0.0) return;
    const double k = target / std::sqrt(e / static_cast<double>(seg.size()));
    for (std::size_t i = 0; i < seg.size() && pos + i < n; ++i) out[pos + i] += k * seg[i];
  };
  while (pos < n) {
    const double kind = u(rng);
    std::size_t len = 0;
    if (kind < 0.6) {  // voiced
      len = static_cast<std::size_t>((0.08 + 0.17 * u(rng)) * fs);
      const double f1 = 300 + 500 * u(rng), f2 = 900 + 1400 * u(rng), f3 = 2300 + 800 * u(rng), f4 = 3300 + 500 * u(rng);
      const double f1_end = f1 * (0.8 + 0.4 * u(rng)), f2_end = f2 * (0.8 + 0.4 * u(rng));
      const double level = 0.5 + u(rng);
      seg.assign(len, 0.0);
      const double f0_start = f0_base * (0.85 + 0.3 * u(rng)), f0_end = f0_base * (0.85 + 0.3 * u(rng));
      detail::Resonator r1(f1, 60, fs), r2(f2, 90, fs), r3(f3, 150, fs), r4(f4, 200, fs);
      double phase = 0.0, s1 = 0.0, s2 = 0.0, prev = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double a = static_cast<double>(i) / static_cast<double>(len);
        if (i % 80 == 0) {  // formant glide, 5 ms steps
          r1.retune(f1 + (f1_end - f1) * a, 60, fs);
          r2.retune(f2 + (f2_end - f2) * a, 90, fs);
        }
        const double f0 = f0_start + (f0_end - f0_start) * a;
        phase += f0 / fs;
        double pulse = 0.0;
        if (phase >= 1.0) {
          phase -= 1.0;
          pulse = 1.0;
        }
        const double src = pulse + 0.01 * g(rng);  // slight aspiration
        const double glottal = (1 - rho) * (1 - rho) * src + 2 * rho * s1 - rho * rho * s2;
        s2 = s1;
        s1 = glottal;
        const double radiated = glottal - prev;
        prev = glottal;
        const double env = std::sin(std::numbers::pi * a);
        seg[i] = env * env * r4(r3(r2(r1(radiated))));
      }
      place(level);
    } else if (kind < 0.8) {  // fricative
      len = static_cast<std::size_t>((0.05 + 0.07 * u(rng)) * fs);
      const double fc = 3500 + 2500 * u(rng);
      detail::Resonator r(fc, 300 + 300 * u(rng), fs), r2(fc * 1.25, 500, fs);
      const double level = std::pow(10.0, -(10.0 + 10.0 * u(rng)) / 20.0);
      seg.assign(len, 0.0);
      double x1 = 0.0, x2 = 0.0, x3 = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double a = static_cast<double>(i) / static_cast<double>(len);
        const double x = g(rng);
        const double hp = x - 3 * x1 + 3 * x2 - x3;  // +18 dB/oct
        x3 = x2;
        x2 = x1;
        x1 = x;
        seg[i] = std::sin(std::numbers::pi * a) * r2(r(hp));
      }
      place(level);
    } else {  // pause
      len = static_cast<std::size_t>((0.05 + 0.25 * u(rng)) * fs);
    }
    pos += len;
  }
  double e = 0.0;
  for (double v : out) e += v * v;
  // Recording floor 50 dB under the speech level; a few LSB at 16 bits.
  std::normal_distribution<double> floor_noise(0.0, std::sqrt(e / static_cast<double>(n)) * 3.1622776601683794e-3);
  for (auto& v : out) v += floor_noise(rng);
  e = 0.0;
  for (double v : out) e += v * v;
  const double r = std::sqrt(e / static_cast<double>(n));
  if (r > 0.0)
    for (auto& v : out) v *= 0.05 / r;
  return out;
}

struct DataConfig {
  Scenario scenario = Scenario::kRandom;
  int mics = 4;
  int count = 10;
  bool noisy = false;
  std::uint64_t seed = 0;
  NoiseSpec noise;
  double synth_seconds = 3.0;  // used when no corpus is given
  double peak = 0.5;           // common scene gain targets this absolute peak
  int jobs = 1;

  void validate() const {
    DSSDRV_CHECK(mics >= 1, ConfigError, "mics must be at least 1");
    DSSDRV_CHECK(scenario != Scenario::kWinning || mics >= 2, ConfigError,
                 "the winning scenario needs at least two microphones");
    DSSDRV_CHECK(count >= 1, ConfigError, "count must be at least 1");
    DSSDRV_CHECK(synth_seconds > 0.1, ConfigError, "synthetic utterances must be longer than 0.1 s");
    DSSDRV_CHECK(peak > 0.0 && peak < 1.0, ConfigError, "peak must lie in (0, 1)");
    DSSDRV_CHECK(jobs >= 1, ConfigError, "jobs must be at least 1");
    noise.validate();
  }
};

struct ManifestRecord {
  std::string id;
  fs::path clean;
  std::vector<fs::path> reverberant;
  RoomSpec room;
  ScenePlacement placement;
  bool noisy = false;
  std::uint64_t noise_seed = 0;
  std::vector<double> snr_db;  // per microphone, empty when noiseless
  double mic_gain = 1.0;
  std::size_t samples = 0;

  std::size_t mics() const { return reverberant.size(); }
};

namespace detail {

inline Json point_json(const Point3& p) { return Json::array({p.x, p.y, p.z}); }
inline Point3 point_from(const Json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

inline std::string mic_class_name(MicClass c) {
  return c == MicClass::kNear ? "near" : c == MicClass::kFar ? "far" : "random";
}
inline MicClass parse_mic_class(const std::string& s) {
  if (s == "near") return MicClass::kNear;
  if (s == "far") return MicClass::kFar;
  if (s == "random") return MicClass::kRandom;
  throw FormatError("unknown microphone class '" + s + "'");
}

inline std::string path_for_manifest(const fs::path& p, const fs::path& base) {
  auto rel = p.lexically_relative(base);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

}  // namespace detail

inline Json to_json(const ManifestRecord& r, const fs::path& base) {
  Json mics = Json::array(), classes = Json::array(), rev = Json::array();
  for (const auto& m : r.placement.mics) mics.push_back(detail::point_json(m));
  for (auto c : r.placement.classes) classes.push_back(detail::mic_class_name(c));
  for (const auto& p : r.reverberant) rev.push_back(detail::path_for_manifest(p, base));
  Json j;
  j["schema"] = kManifestSchema;
  j["id"] = r.id;
  j["clean"] = detail::path_for_manifest(r.clean, base);
  j["reverberant"] = rev;
  j["samples"] = r.samples;
  j["room"] = {{"lx", r.room.lx}, {"ly", r.room.ly}, {"h", r.room.h}, {"t60", r.room.t60}, {"beta", r.room.beta}};
  j["placement"] = {{"scenario", to_string(r.placement.scenario)},
                    {"source", detail::point_json(r.placement.source)},
                    {"mics", mics},
                    {"classes", classes},
                    {"d_crit", r.placement.d_crit},
                    {"far_clamped", r.placement.far_clamped}};
  j["noisy"] = r.noisy;
  j["noise_seed"] = r.noise_seed;
  j["snr_db"] = r.noisy ? Json(r.snr_db) : Json(nullptr);
  j["mic_gain"] = r.mic_gain;
  return j;
}

inline ManifestRecord record_from_json(const Json& j, const fs::path& base) {
  DSSDRV_CHECK(j.value("schema", std::string()) == kManifestSchema, FormatError, "manifest record schema is not ",
               kManifestSchema);
  auto resolve = [&](const std::string& s) {
    fs::path p(s);
    return p.is_absolute() ? p : base / p;
  };
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.clean = resolve(j.at("clean").get<std::string>());
  for (const auto& p : j.at("reverberant")) r.reverberant.push_back(resolve(p.get<std::string>()));
  DSSDRV_CHECK(!r.reverberant.empty(), FormatError, "record ", r.id, " lists no reverberant files");
  r.samples = j.value("samples", std::size_t{0});
  const auto& room = j.at("room");
  r.room = {room.at("lx").get<double>(), room.at("ly").get<double>(), room.at("h").get<double>(),
            room.at("t60").get<double>(), room.at("beta").get<double>()};
  const auto& pl = j.at("placement");
  r.placement.scenario = parse_scenario(pl.at("scenario").get<std::string>());
  r.placement.source = detail::point_from(pl.at("source"));
  for (const auto& m : pl.at("mics")) r.placement.mics.push_back(detail::point_from(m));
  for (const auto& c : pl.at("classes")) r.placement.classes.push_back(detail::parse_mic_class(c.get<std::string>()));
  r.placement.d_crit = pl.at("d_crit").get<double>();
  r.placement.far_clamped = pl.value("far_clamped", false);
  r.noisy = j.value("noisy", false);
  r.noise_seed = j.value("noise_seed", std::uint64_t{0});
  if (r.noisy && j.contains("snr_db") && j["snr_db"].is_array()) r.snr_db = j["snr_db"].get<std::vector<double>>();
  r.mic_gain = j.value("mic_gain", 1.0);
  return r;
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::ofstream out(path, std::ios::binary);
  DSSDRV_CHECK(out, DataError, "cannot write manifest ", path.string());
  for (const auto& r : records) out << to_json(r, base).dump() << '\n';
  DSSDRV_CHECK(out, DataError, "short write to manifest ", path.string());
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  DSSDRV_CHECK(in, DataError, "cannot open manifest ", path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(Json::parse(line), base));
    } catch (const Json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  DSSDRV_CHECK(!out.empty(), DataError, "manifest ", path.string(), " has no records");
  return out;
}

// 16 kHz mono WAVs under `dir`, sorted by path; unreadable or off-rate files
// are skipped with a warning.
inline std::vector<std::pair<fs::path, Waveform>> load_corpus(const fs::path& dir, std::ostream& log = std::cerr) {
  DSSDRV_CHECK(fs::is_directory(dir), DataError, "corpus directory ", dir.string(), " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::pair<fs::path, Waveform>> out;
  for (const auto& f : files) {
    try {
      auto w = read_wav(f);
      if (w.sample_rate != kSampleRate) {
        log << "warning: skipping " << f.string() << " (" << w.sample_rate << " Hz)\n";
        continue;
      }
      if (w.size() < static_cast<std::size_t>(kSampleRate / 10)) {
        log << "warning: skipping " << f.string() << " (shorter than 0.1 s)\n";
        continue;
      }
      out.emplace_back(fs::absolute(f).lexically_normal(), std::move(w));
    } catch (const FormatError& e) {
      log << "warning: skipping " << e.what() << '\n';
    }
  }
  DSSDRV_CHECK(!out.empty(), DataError, "no usable 16 kHz mono WAV files in ", dir.string());
  return out;
}

// One scene: M reverberant (optionally noisy) copies of `clean`, each
// truncated to the clean length and sharing one gain so the loudest sample
// sits at cfg.peak.
struct SceneSignals {
  std::vector<std::vector<double>> mics;
  std::vector<double> snr_db;
  double gain = 1.0;
};

inline SceneSignals render_scene(std::span<const double> clean, const RoomSpec& room, const ScenePlacement& p,
                                 const DataConfig& cfg, std::uint64_t noise_seed) {
  SceneSignals s;
  for (const auto& m : p.mics) {
    auto rir = simulate_rir(room, p.source, m);
    auto y = fft_convolve(clean, rir);
    y.resize(clean.size());
    s.mics.push_back(std::move(y));
  }
  std::vector<std::vector<double>> noise;
  if (cfg.noisy) {
    for (std::size_t i = 0; i < s.mics.size(); ++i) {
      auto nrng = derive_rng(noise_seed, i);
      noise.push_back(gen_noise(clean.size(), s.mics[i], cfg.noise, nrng));
      s.snr_db.push_back(snr_db(s.mics[i], noise.back()));
    }
    for (std::size_t i = 0; i < s.mics.size(); ++i)
      for (std::size_t k = 0; k < clean.size(); ++k) s.mics[i][k] += noise[i][k];
  }
  double peak = 0.0;
  for (const auto& y : s.mics)
    for (double v : y) peak = std::max(peak, std::abs(v));
  DSSDRV_CHECK(peak > 0.0, NumericError, "simulated scene is silent");
  s.gain = cfg.peak / peak;
  for (auto& y : s.mics)
    for (auto& v : y) v *= s.gain;
  return s;
}

// Writes <out>/clean (synthetic sources only), <out>/reverberant and
// <out>/manifest.jsonl. An empty corpus path selects the synthetic source.
inline std::vector<ManifestRecord> generate_dataset(const DataConfig& cfg, const fs::path& corpus_dir,
                                                    const fs::path& out_dir, std::ostream& log = std::cerr) {
  cfg.validate();
  std::vector<std::pair<fs::path, Waveform>> corpus;
  if (!corpus_dir.empty()) corpus = load_corpus(corpus_dir, log);
  fs::create_directories(out_dir / "reverberant");
  if (corpus.empty()) fs::create_directories(out_dir / "clean");

  std::vector<std::optional<ManifestRecord>> records(static_cast<std::size_t>(cfg.count));
  std::vector<std::string> failures(records.size());
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < cfg.count; i = next++) {
      const auto idx = static_cast<std::size_t>(i);
      try {
        char name[32];
        std::snprintf(name, sizeof name, "utt%05d", i);
        ManifestRecord r;
        r.id = name;
        auto rng = derive_rng(cfg.seed, idx, 1);
        std::vector<double> clean;
        if (corpus.empty()) {
          auto srng = derive_rng(cfg.seed, idx, 2);
          clean = synth_speech(cfg.synth_seconds, srng);
          r.clean = out_dir / "clean" / (r.id + ".wav");
          write_wav(r.clean, {clean, kSampleRate});
          clean = read_wav(r.clean).samples;  // the reference is what was written
        } else {
          const auto& src = corpus[idx % corpus.size()];
          r.clean = src.first;
          clean = src.second.samples;
        }
        auto [room, placement] = sample_scene(cfg.scenario, cfg.mics, rng);
        r.room = room;
        r.placement = placement;
        r.noisy = cfg.noisy;
        r.noise_seed = derive_seed(cfg.seed, idx, 3);
        auto scene = render_scene(clean, room, placement, cfg, r.noise_seed);
        r.snr_db = scene.snr_db;
        r.mic_gain = scene.gain;
        r.samples = clean.size();
        for (std::size_t m = 0; m < scene.mics.size(); ++m) {
          auto p = out_dir / "reverberant" / (r.id + "_mic" + std::to_string(m) + ".wav");
          write_wav(p, {scene.mics[m], kSampleRate});
          r.reverberant.push_back(p);
        }
        records[idx] = std::move(r);
      } catch (const std::exception& e) {
        failures[idx] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < cfg.jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<ManifestRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i]) {
      out.push_back(std::move(*records[i]));
    } else {
      log << "warning: utterance " << i << " failed: " << failures[i] << '\n';
    }
  }
  DSSDRV_CHECK(!out.empty(), DataError, "dataset generation produced no records");
  write_manifest(out_dir / "manifest.jsonl", out);
  return out;
}

}  // namespace dssdrv
