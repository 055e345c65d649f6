// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Training data preparation, the variable-set-size training loop with
// validation and checkpoints, and single-utterance enhancement.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dssdrv/checkpoint.hpp"
#include "dssdrv/dataset.hpp"
#include "dssdrv/nn.hpp"
#include "dssdrv/optim.hpp"
#include "dssdrv/signal.hpp"
#include "dssdrv/wav.hpp"

namespace dssdrv {

struct TrainConfig {
  std::vector<int> set_sizes{4, 8};
  int batch = 4;
  AdamConfig adam;
  std::uint64_t steps = 2000;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 200;
  double val_fraction = 0.1;

  void validate() const {
    DSSDRV_CHECK(!set_sizes.empty(), ConfigError, "set sizes must not be empty");
    for (int m : set_sizes) DSSDRV_CHECK(m >= 1, ConfigError, "set sizes must be positive, got ", m);
    DSSDRV_CHECK(batch >= 1, ConfigError, "batch size must be positive");
    DSSDRV_CHECK(steps >= 1, ConfigError, "training needs at least one step");
    DSSDRV_CHECK(checkpoint_every >= 1, ConfigError, "checkpoint cadence must be positive");
    DSSDRV_CHECK(val_fraction >= 0.0 && val_fraction < 1.0, ConfigError, "validation fraction must be in [0,1)");
    adam.validate();
  }

  int max_set_size() const { return *std::max_element(set_sizes.begin(), set_sizes.end()); }
};

// One utterance in the log domain: microphones at the jointly normalized
// scale and the clean target normalized on its own to the same RMS.
struct TrainingUtterance {
  std::string id;
  std::vector<LogSpectrum> inputs;
  LogSpectrum target;

  std::size_t frames() const { return target.frames; }
};

struct TrainingData {
  std::vector<TrainingUtterance> train, val;
  NormStats stats;
};

inline TrainingUtterance make_training_utterance(std::string id, std::span<const Waveform> mics, const Waveform& clean) {
  DSSDRV_CHECK(clean.sample_rate == mics[0].sample_rate, FormatError, id, ": clean and reverberant rates differ");
  auto obs = analyze(mics);
  Waveform c = clean;
  c.samples.resize(obs.length, 0.0);
  TrainingUtterance u;
  u.id = std::move(id);
  u.inputs = std::move(obs.log_specs);
  u.target = log_magnitude(stft(rms_normalize(std::span<const Waveform>(&c, 1)).waves[0]));
  return u;
}

inline TrainingUtterance load_training_utterance(const ManifestRecord& r) {
  DSSDRV_CHECK(!r.reverberant.empty(), DataError, r.id, ": record lists no microphone signals");
  std::vector<Waveform> mics;
  for (const auto& p : r.reverberant) mics.push_back(read_wav(p));
  return make_training_utterance(r.id, mics, read_wav(r.clean));
}

// Splits off the last ceil(val_fraction * N) records for validation (none
// when N == 1) and takes the normalization range over the training part.
inline TrainingData prepare_training_data(const std::vector<ManifestRecord>& records, double val_fraction) {
  DSSDRV_CHECK(!records.empty(), DataError, "training needs a nonempty manifest");
  std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(records.size())));
  if (records.size() < 2) n_val = 0;
  n_val = std::min(n_val, records.size() - 1);
  TrainingData d;
  NormStatsAccumulator acc;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto u = load_training_utterance(records[i]);
    if (i < records.size() - n_val) {
      for (const auto& s : u.inputs) acc.add(s);
      acc.add(u.target);
      d.train.push_back(std::move(u));
    } else {
      d.val.push_back(std::move(u));
    }
  }
  d.stats = acc.stats();
  return d;
}

struct Batch {
  Tensor<float> x;       // [B,M,1,T,F]
  Tensor<float> target;  // [B,1,T,F]
  std::vector<int> valid_rows;
};

namespace detail {

// Fills one [T,F] image at `dst` from frames [start, start+T) of `s`, mapped
// to [-1,1]; frames past the end stay at -1.
inline void fill_slice(float* dst, const LogSpectrum& s, std::size_t start, std::size_t t, std::size_t f,
                       const NormStats& stats) {
  std::fill(dst, dst + t * f, -1.0f);
  for (std::size_t r = 0; r < t && start + r < s.frames; ++r)
    for (std::size_t k = 0; k < f; ++k) dst[r * f + k] = static_cast<float>(stats.map(s.at(start + r, k)));
}

}  // namespace detail

// Builds a batch from explicit (utterance, channels, start) choices.
struct SliceChoice {
  const TrainingUtterance* utt;
  std::vector<std::size_t> channels;
  std::size_t start;
};

// `bins` > 0 keeps only the lowest bins (a band-limited model).
inline Batch make_batch(std::span<const SliceChoice> picks, const NormStats& stats, int t_slice, int bins = 0) {
  DSSDRV_CHECK(!picks.empty(), ShapeError, "empty batch");
  const std::size_t m = picks[0].channels.size(), t = static_cast<std::size_t>(t_slice);
  const std::size_t full = picks[0].utt->target.bins - 1;
  DSSDRV_CHECK(bins >= 0 && static_cast<std::size_t>(bins) <= full, ShapeError, "cannot keep ", bins, " of ", full,
               " bins");
  const std::size_t f = bins > 0 ? static_cast<std::size_t>(bins) : full;
  Batch b;
  std::vector<float> x(picks.size() * m * t * f), z(picks.size() * t * f);
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto& p = picks[i];
    DSSDRV_CHECK(p.channels.size() == m, ShapeError, "batch entries disagree on set size");
    DSSDRV_CHECK(p.utt->target.bins - 1 == full, ShapeError, "batch entries disagree on frequency bins");
    for (std::size_t j = 0; j < m; ++j)
      detail::fill_slice(x.data() + (i * m + j) * t * f, p.utt->inputs[p.channels[j]], p.start, t, f, stats);
    detail::fill_slice(z.data() + i * t * f, p.utt->target, p.start, t, f, stats);
    b.valid_rows.push_back(static_cast<int>(std::min(t, p.utt->frames() - std::min(p.start, p.utt->frames()))));
  }
  const auto bi = static_cast<std::int64_t>(picks.size());
  b.x = Tensor<float>({bi, static_cast<std::int64_t>(m), 1, static_cast<std::int64_t>(t), static_cast<std::int64_t>(f)},
                      std::move(x));
  b.target = Tensor<float>({bi, 1, static_cast<std::int64_t>(t), static_cast<std::int64_t>(f)}, std::move(z));
  return b;
}

// Start of the t-frame window with the most clean energy in the lowest
// `bins` bins, searching from `from` on.
inline std::size_t most_active_start(const TrainingUtterance& u, int t_slice, int bins, std::size_t from = 0) {
  const std::size_t t = static_cast<std::size_t>(t_slice), f = static_cast<std::size_t>(bins);
  DSSDRV_CHECK(f >= 1 && f < u.target.bins, ShapeError, "bad band width ", bins);
  DSSDRV_CHECK(from + t <= u.frames(), ShapeError, "utterance has ", u.frames(), " frames, need ", from + t);
  std::vector<double> row(u.frames(), 0.0);
  for (std::size_t r = 0; r < row.size(); ++r)
    for (std::size_t k = 0; k < f; ++k) row[r] += u.target.at(r, k);
  std::size_t best = from;
  double sum = std::accumulate(row.begin() + from, row.begin() + from + t, 0.0), top = sum;
  for (std::size_t s0 = from + 1; s0 + t <= row.size(); ++s0) {
    sum += row[s0 + t - 1] - row[s0 - 1];
    if (sum > top) top = sum, best = s0;
  }
  return best;
}

// Forward, GradLoss over the valid rows, backward and one optimizer update.
// Returns the loss before the update.
template <typename T>
double train_step(DssUNet<T>& net, Adam<T>& opt, const Tensor<T>& x, const Tensor<T>& target,
                  const std::vector<int>& valid_rows = {}) {
  net.set_mode(Mode::kTrain);
  auto set = net.parameters();
  opt.zero_grad(set);
  auto loss = grad_loss(net.forward(x), target, valid_rows);
  const double value = loss.item();
  DSSDRV_CHECK(std::isfinite(value), NumericError, "non-finite training loss (", value, ")");
  backward(loss);
  opt.step(set);
  return value;
}

struct TrainSummary {
  std::vector<double> losses;   // per step of this run
  std::vector<int> set_sizes;   // per step of this run
  std::vector<std::pair<std::uint64_t, double>> val;  // (step, validation loss)
  std::optional<double> best_val;
  std::uint64_t final_step = 0;
};

class Trainer {
 public:
  Trainer(const UNetConfig& model, const TrainConfig& cfg, const NormStats& stats)
      : cfg_(cfg), stats_(stats), net_(model, cfg.seed), rng_(derive_rng(cfg.seed, 0, 0x7472)) {
    cfg_.validate();
    stats_.validate();
    auto set = net_.parameters();
    opt_ = Adam<float>(cfg_.adam, set);
  }

  // Continues from a training checkpoint. `cfg` may extend the step count;
  // the optimizer settings stored in the checkpoint win.
  static Trainer resume(const std::filesystem::path& ckpt, TrainConfig cfg) {
    auto loaded = load_checkpoint<float>(ckpt);
    DSSDRV_CHECK(loaded.train.has_value(), FormatError, ckpt.string(), " holds no training state");
    auto& ts = *loaded.train;
    cfg.adam = ts.adam;
    cfg.seed = ts.seed;
    Trainer t(loaded.net.config(), cfg, loaded.stats);
    t.net_ = std::move(loaded.net);
    auto set = t.net_.parameters();
    t.opt_ = Adam<float>(ts.adam, set);
    t.opt_.set_steps(ts.adam_steps);
    t.opt_.first_moments() = ts.adam_m;
    t.opt_.second_moments() = ts.adam_v;
    std::istringstream rs(ts.rng);
    rs >> t.rng_;
    DSSDRV_CHECK(!rs.fail(), FormatError, ckpt.string(), ": unreadable sampler state");
    t.step_ = ts.step;
    t.best_val_ = ts.best_val;
    return t;
  }

  // Draws M from the configured set sizes, then B utterances with
  // replacement, a channel subset without replacement and a random start.
  // Utterances with fewer channels than M lower M for the whole batch.
  Batch sample_batch(const std::vector<TrainingUtterance>& utts, int* set_size = nullptr) {
    DSSDRV_CHECK(!utts.empty(), DataError, "no training utterances");
    std::uniform_int_distribution<std::size_t> pick_m(0, cfg_.set_sizes.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_u(0, utts.size() - 1);
    std::size_t m = static_cast<std::size_t>(cfg_.set_sizes[pick_m(rng_)]);
    std::vector<const TrainingUtterance*> chosen;
    for (int i = 0; i < cfg_.batch; ++i) chosen.push_back(&utts[pick_u(rng_)]);
    for (const auto* u : chosen) m = std::min(m, u->inputs.size());
    const auto t = static_cast<std::size_t>(net_.config().t_slice);
    std::vector<SliceChoice> picks;
    for (const auto* u : chosen) {
      std::vector<std::size_t> ch(u->inputs.size());
      std::iota(ch.begin(), ch.end(), std::size_t{0});
      for (std::size_t j = 0; j < m; ++j) {
        std::uniform_int_distribution<std::size_t> d(j, ch.size() - 1);
        std::swap(ch[j], ch[d(rng_)]);
      }
      ch.resize(m);
      std::size_t start = 0;
      if (u->frames() > t) start = std::uniform_int_distribution<std::size_t>(0, u->frames() - t)(rng_);
      picks.push_back({u, std::move(ch), start});
    }
    if (set_size) *set_size = static_cast<int>(m);
    return make_batch(picks, stats_, static_cast<int>(t), net_.config().freq_bins);
  }

  double step(const Batch& b) {
    const double loss = train_step(net_, opt_, b.x, b.target, b.valid_rows);
    ++step_;
    return loss;
  }

  // Mean GradLoss in eval mode over the first slice of each utterance, using
  // up to the largest configured set size of its channels.
  double validate(const std::vector<TrainingUtterance>& utts) {
    DSSDRV_CHECK(!utts.empty(), DataError, "no validation utterances");
    NoGradGuard guard;
    const Mode before = net_.mode();
    net_.set_mode(Mode::kEval);
    double total = 0.0;
    for (const auto& u : utts) {
      std::vector<std::size_t> ch(std::min<std::size_t>(u.inputs.size(), static_cast<std::size_t>(cfg_.max_set_size())));
      std::iota(ch.begin(), ch.end(), std::size_t{0});
      const SliceChoice pick{&u, ch, 0};
      auto b = make_batch(std::span<const SliceChoice>(&pick, 1), stats_, net_.config().t_slice, net_.config().freq_bins);
      total += grad_loss(net_.forward(b.x), b.target, b.valid_rows).item();
    }
    net_.set_mode(before);
    return total / static_cast<double>(utts.size());
  }

  TrainingState state() const {
    TrainingState ts;
    ts.step = step_;
    ts.seed = cfg_.seed;
    std::ostringstream os;
    os << rng_;
    ts.rng = os.str();
    ts.adam = opt_.config();
    ts.adam_steps = opt_.steps();
    ts.adam_m = opt_.first_moments();
    ts.adam_v = opt_.second_moments();
    ts.best_val = best_val_;
    return ts;
  }

  void save(const std::filesystem::path& path) {
    const auto ts = state();
    save_checkpoint(path, net_, stats_, cfg_.seed, &ts);
  }

  // Runs until cfg.steps. With `out_dir`, appends to out_dir/train_log.tsv
  // and writes step_<n>.ckpt, last.ckpt and best.ckpt at every cadence point
  // and at the end.
  TrainSummary run(const TrainingData& data, const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    TrainSummary s;
    std::ofstream log;
    if (out_dir) {
      std::filesystem::create_directories(*out_dir);
      const auto path = *out_dir / "train_log.tsv";
      const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
      log.open(path, std::ios::app);
      DSSDRV_CHECK(log.good(), ConfigError, "cannot append to ", path.string());
      log << std::setprecision(9);
      if (fresh) log << "step\tset_size\tloss\tval_loss\tbest_val\n";
      else if (step_ > 0) log << "# resumed at step " << step_ << "\n";
    }
    const auto& val = data.val.empty() ? data.train : data.val;
    while (step_ < cfg_.steps) {
      int m = 0;
      auto b = sample_batch(data.train, &m);
      const double loss = step(b);
      s.losses.push_back(loss);
      s.set_sizes.push_back(m);
      const bool cadence = step_ % cfg_.checkpoint_every == 0 || step_ == cfg_.steps;
      std::optional<double> v;
      if (cadence) {
        v = validate(val);
        s.val.emplace_back(step_, *v);
        if (!best_val_ || *v < *best_val_) best_val_ = *v;
      }
      if (log.is_open()) {
        log << step_ << '\t' << m << '\t' << loss << '\t';
        if (v) log << *v << '\t' << *best_val_;
        else log << '\t';
        log << '\n';
        log.flush();
      }
      if (cadence && out_dir) {
        std::ostringstream name;
        name << "step_" << std::setw(8) << std::setfill('0') << step_ << ".ckpt";
        save(*out_dir / name.str());
        std::filesystem::copy_file(*out_dir / name.str(), *out_dir / "last.ckpt",
                                   std::filesystem::copy_options::overwrite_existing);
        if (*best_val_ == *v)
          std::filesystem::copy_file(*out_dir / name.str(), *out_dir / "best.ckpt",
                                     std::filesystem::copy_options::overwrite_existing);
      }
    }
    s.best_val = best_val_;
    s.final_step = step_;
    return s;
  }

  DssUNet<float>& net() { return net_; }
  Adam<float>& optimizer() { return opt_; }
  const NormStats& stats() const { return stats_; }
  const TrainConfig& config() const { return cfg_; }
  std::uint64_t steps_done() const { return step_; }

 private:
  TrainConfig cfg_;
  NormStats stats_;
  DssUNet<float> net_;
  Adam<float> opt_;
  std::mt19937_64 rng_;
  std::uint64_t step_ = 0;
  std::optional<double> best_val_;
};

// Full inference chain for one observation: joint RMS normalization, STFT,
// slicing, the network on every slice in eval mode, and resynthesis with the
// reference microphone's phase. The output stays at the normalized level
// unless `restore_gain` is set.
template <typename T>
Waveform enhance(DssUNet<T>& net, const NormStats& stats, std::span<const Waveform> mics, bool restore_gain = false) {
  auto obs = analyze(mics);
  const auto& cfg = net.config();
  DSSDRV_CHECK(obs.stfts[0].bins - 1 == static_cast<std::size_t>(cfg.freq_bins), ShapeError, "model expects ",
               cfg.freq_bins, " frequency bins, signal has ", obs.stfts[0].bins - 1);
  DSSDRV_CHECK(obs.stfts[0].frames > 0, ShapeError, "input shorter than one analysis window");
  const auto slices = prepare_slices(obs.log_specs, stats, cfg.t_slice);
  NoGradGuard guard;
  const Mode before = net.mode();
  net.set_mode(Mode::kEval);
  std::vector<Tensor<float>> outs;
  for (const auto& s : slices) {
    Shape shape = s.data.shape();
    shape.insert(shape.begin(), 1);
    Tensor<T> x;
    if constexpr (std::is_same_v<T, float>) {
      x = Tensor<T>(shape, s.data.values());
    } else {
      x = Tensor<T>(shape, std::vector<T>(s.data.values().begin(), s.data.values().end()));
    }
    auto y = net.forward(x);
    outs.emplace_back(Shape{y.dim(2), y.dim(3)}, std::vector<float>(y.values().begin(), y.values().end()));
  }
  net.set_mode(before);
  return reconstruct(outs, obs.stfts[obs.reference], stats, obs.length,
                     restore_gain ? std::optional<double>(obs.normalized.gain) : std::nullopt);
}

}  // namespace dssdrv
