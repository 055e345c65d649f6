// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Command-line front end: gen-data, train, enhance, wpe, evaluate, self-test.
// Exit codes: 0 ok, 1 failure, 2 config/usage, 3 data, 4 numeric.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dssdrv/config.hpp"
#include "dssdrv/metrics.hpp"
#include "dssdrv/train.hpp"
#include "dssdrv/verify.hpp"
#include "dssdrv/wpe.hpp"

namespace {

using namespace dssdrv;

enum Exit { kOk = 0, kFail = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::optional<fs::path> config;
  std::optional<int> jobs;

  AppConfig load() const {
    AppConfig c = config ? load_config(*config) : AppConfig{};
    if (jobs) {
      DSSDRV_CHECK(*jobs >= 1, ConfigError, "--jobs must be at least 1");
      c.data.jobs = c.wpe.jobs = c.eval.jobs = *jobs;
    }
    return c;
  }
};

template <typename V>
void take(const std::optional<V>& flag, V& dst) {
  if (flag) dst = *flag;
}

fs::path required(const std::optional<fs::path>& p, const char* what) {
  DSSDRV_CHECK(p.has_value(), ConfigError, what, " is required (flag or config)");
  return *p;
}

std::vector<Waveform> read_inputs(const std::vector<fs::path>& files) {
  DSSDRV_CHECK(!files.empty(), ConfigError, "at least one input WAV is required");
  std::vector<Waveform> w;
  for (const auto& f : files) w.push_back(read_wav(f));
  for (std::size_t i = 1; i < w.size(); ++i) {
    DSSDRV_CHECK(w[i].sample_rate == w[0].sample_rate, FormatError, files[i].string(), ": sample rate ",
                 w[i].sample_rate, " differs from ", w[0].sample_rate);
    DSSDRV_CHECK(w[i].size() == w[0].size(), FormatError, files[i].string(), ": ", w[i].size(),
                 " samples, expected ", w[0].size());
  }
  return w;
}

// ---- gen-data

struct GenData {
  std::optional<fs::path> out, corpus;
  std::optional<std::string> scenario;
  std::optional<int> mics, count;
  std::optional<std::uint64_t> seed;
  std::optional<double> snr;
  bool noisy = false;

  int run(const Common& common) const {
    auto c = common.load();
    if (scenario) c.data.scenario = parse_scenario(*scenario);
    take(mics, c.data.mics);
    take(count, c.data.count);
    take(seed, c.data.seed);
    take(snr, c.data.noise.snr_db);
    if (noisy) c.data.noisy = true;
    if (out) c.data_out = fs::absolute(*out);
    if (corpus) c.corpus = fs::absolute(*corpus);
    c.data.validate();
    const auto dir = required(c.data_out, "--out");
    const auto recs = generate_dataset(c.data, c.corpus.value_or(fs::path{}), dir, std::cerr);
    std::size_t wavs = 0;
    for (const auto& r : recs) wavs += r.mics();
    std::cout << "wrote " << recs.size() << " records (" << wavs << " microphone WAVs, scenario "
              << to_string(c.data.scenario) << (c.data.noisy ? ", noisy" : "") << ") to "
              << (dir / "manifest.jsonl").string() << '\n';
    return kOk;
  }
};

// ---- train

struct Train {
  std::optional<fs::path> data, out;
  std::vector<int> set_sizes;
  std::optional<std::string> agg;
  std::optional<std::uint64_t> steps, checkpoint_every;
  std::optional<int> batch;
  std::optional<double> lr, val_fraction;
  std::optional<std::uint64_t> seed;
  bool tiny = false, resume = false;

  int run(const Common& common) const {
    auto c = common.load();
    if (tiny && !c.tiny) {
      const auto a = c.model.aggregation;
      c.model = UNetConfig::tiny();
      c.model.aggregation = a;
    }
    if (agg) c.model.aggregation = parse_aggregation(*agg);
    if (!set_sizes.empty()) c.train.set_sizes = set_sizes;
    take(steps, c.train.steps);
    take(batch, c.train.batch);
    take(checkpoint_every, c.train.checkpoint_every);
    take(lr, c.train.adam.lr);
    take(val_fraction, c.train.val_fraction);
    take(seed, c.train.seed);
    if (data) c.train_data = fs::absolute(*data);
    if (out) c.train_out = fs::absolute(*out);
    c.train.validate();
    c.model.validate();
    const auto manifest = required(c.train_data, "--data");
    const auto dir = required(c.train_out, "--out");

    const auto data = prepare_training_data(read_manifest(manifest), c.train.val_fraction);
    std::optional<Trainer> trainer;
    const auto last = dir / "last.ckpt";
    if (resume && fs::exists(last)) {
      trainer.emplace(Trainer::resume(last, c.train));
      std::cerr << "resuming from " << last.string() << " at step " << trainer->steps_done() << '\n';
    } else {
      DSSDRV_CHECK(!resume || !fs::exists(dir / "train_log.tsv"), ConfigError, dir.string(),
                   " holds a training log but no last.ckpt to resume from");
      DSSDRV_CHECK(resume || !fs::exists(last), ConfigError, dir.string(),
                   " already holds a run; pass --resume to continue it or choose another --out");
      trainer.emplace(c.model, c.train, data.stats);
    }
    // A resumed run keeps the geometry stored in its checkpoint.
    const auto agg_used = trainer->net().config().aggregation;
    std::set<int> distinct(c.train.set_sizes.begin(), c.train.set_sizes.end());
    if (agg_used == Aggregation::kSum && distinct.size() > 1)
      std::cerr << "warning: sum aggregation scales with the set size and does not generalize across different M; "
                   "use --agg mean when training on several set sizes\n";
    std::cerr << "training " << trainer->net().parameters().num_params() << " parameters on " << data.train.size()
              << " utterances (" << data.val.size() << " held out), set sizes";
    for (int m : c.train.set_sizes) std::cerr << ' ' << m;
    std::cerr << ", " << to_string(agg_used) << " aggregation\n";
    const auto s = trainer->run(data, dir);
    if (!s.losses.empty())
      std::cout << "steps " << s.final_step << ": loss " << s.losses.front() << " -> " << s.losses.back();
    else
      std::cout << "already at step " << s.final_step;
    if (s.best_val) std::cout << ", best validation " << *s.best_val;
    std::cout << "\ncheckpoints and train_log.tsv in " << dir.string() << '\n';
    return kOk;
  }
};

// ---- enhance

struct Enhance {
  fs::path ckpt;
  std::vector<fs::path> inputs;
  std::optional<fs::path> manifest, out;
  bool restore_gain = false;

  int run() const {
    DSSDRV_CHECK(inputs.empty() != !manifest.has_value(), ConfigError, "give either --inputs or --manifest");
    auto loaded = load_checkpoint<float>(ckpt);
    if (!inputs.empty()) {
      const auto mics = read_inputs(inputs);
      fs::path target = out.value_or(fs::path("enhanced.wav"));
      if (target.extension() != ".wav") target /= "enhanced.wav";
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      write_wav(target, enhance(loaded.net, loaded.stats, mics, restore_gain));
      std::cout << "enhanced " << mics.size() << " channel(s) -> " << target.string() << '\n';
      return kOk;
    }
    const auto dir = required(out, "--out");
    fs::create_directories(dir);
    const auto recs = read_manifest(*manifest);
    for (const auto& r : recs) {
      std::vector<fs::path> files(r.reverberant.begin(), r.reverberant.end());
      write_wav(dir / (r.id + ".wav"), enhance(loaded.net, loaded.stats, read_inputs(files), restore_gain));
    }
    std::cout << "enhanced " << recs.size() << " utterances into " << dir.string() << '\n';
    return kOk;
  }
};

// ---- wpe

struct Wpe {
  std::vector<fs::path> inputs;
  std::optional<fs::path> manifest;
  fs::path out;
  std::string name = "wpe";
  std::optional<int> taps, delay, iters;

  int run(const Common& common) const {
    auto c = common.load();
    take(taps, c.wpe.taps);
    take(delay, c.wpe.delay);
    take(iters, c.wpe.iterations);
    c.wpe.validate();
    DSSDRV_CHECK(inputs.empty() != !manifest.has_value(), ConfigError, "give either --inputs or --manifest");
    fs::create_directories(out);
    Json meta{{"taps", c.wpe.taps},
              {"delay", c.wpe.delay},
              {"iterations", c.wpe.iterations},
              {"psd_floor", c.wpe.psd_floor},
              {"loading", c.wpe.loading},
              {"outputs", Json::array()}};
    auto process = [&](const std::string& id, const std::vector<fs::path>& files) {
      WpeResult res;
      const auto outs = wpe_waveforms(read_inputs(files), c.wpe, &res);
      Json entry{{"id", id}, {"objective", res.objective}, {"files", Json::array()}};
      for (std::size_t m = 0; m < outs.size(); ++m) {
        const auto p = out / (id + "_ch" + std::to_string(m) + ".wav");
        write_wav(p, outs[m]);
        entry["files"].push_back(p.filename().string());
      }
      meta["outputs"].push_back(entry);
      return outs.size();
    };
    std::size_t written = 0;
    if (!inputs.empty()) {
      written = process(name, inputs);
    } else {
      for (const auto& r : read_manifest(*manifest))
        written += process(r.id, std::vector<fs::path>(r.reverberant.begin(), r.reverberant.end()));
    }
    std::ofstream(out / "wpe.json") << meta.dump(2) << '\n';
    std::cout << "wrote " << written << " dereverberated channel(s) to " << out.string() << " (taps " << c.wpe.taps
              << ", delay " << c.wpe.delay << ", iterations " << c.wpe.iterations << ")\n";
    return kOk;
  }
};

// ---- evaluate

struct Evaluate {
  std::optional<fs::path> manifest, outputs, report;
  bool reverberant = false;

  int run(const Common& common) const {
    auto c = common.load();
    if (manifest) c.eval.manifest = fs::absolute(*manifest);
    if (outputs) c.eval.outputs = fs::absolute(*outputs);
    if (reverberant) c.eval.outputs.reset();
    DSSDRV_CHECK(reverberant || c.eval.outputs, ConfigError, "give --outputs DIR or --reverberant");
    const auto recs = read_manifest(required(c.eval.manifest, "--manifest"));
    const auto rep = evaluate_manifest(recs, c.eval.outputs, c.eval.jobs);
    print_report(rep, std::cout);
    if (report) {
      if (report->has_parent_path()) fs::create_directories(report->parent_path());
      std::ofstream(*report) << report_json(rep).dump(2) << '\n';
    }
    return kOk;
  }
};

// ---- self-test

struct SelfTest {
  bool quick = false, full = false;

  int run(const Common& common) const {
    DSSDRV_CHECK(!(quick && full), ConfigError, "--quick and --full are exclusive");
    VerifyOptions o;
    o.quick = !full;
    o.jobs = common.jobs.value_or(1);
    o.log = &std::cerr;
    std::vector<int> ids{1, 2, 3, 5, 6, 7, 8, 9};
    if (full) ids = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const auto results = run_checks(ids, o, std::cout);
    int failed = 0;
    for (const auto& r : results) failed += r.passed ? 0 : 1;
    std::cout << (failed ? "FAIL" : "PASS") << " self-test: " << results.size() - failed << "/" << results.size()
              << '\n';
    return failed ? kFail : kOk;
  }
};

int guarded(const std::function<int()>& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const PlacementError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFail;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-microphone speech dereverberation with deep-sets U-Nets"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--jobs", common.jobs, "Worker threads (data generation, WPE, evaluation)");

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Simulate a reverberant dataset and its manifest");
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--corpus", gen.corpus, "Directory of clean 16 kHz WAVs (synthetic speech when absent)");
  g->add_option("--scenario", gen.scenario, "far, near, random or winning");
  g->add_option("--mics", gen.mics, "Microphones per scene");
  g->add_option("--count", gen.count, "Number of utterances");
  g->add_flag("--noisy", gen.noisy, "Add AR(1) noise at the configured SNR");
  g->add_option("--snr", gen.snr, "Noise SNR in dB");
  g->add_option("--seed", gen.seed, "Master seed");

  Train train;
  auto* t = app.add_subcommand("train", "Train a DSS U-Net");
  t->add_option("--data", train.data, "Training manifest (JSONL)");
  t->add_option("--out", train.out, "Checkpoint and log directory");
  t->add_option("--set-sizes", train.set_sizes, "Microphone counts drawn per batch, e.g. 4,8")->delimiter(',');
  t->add_option("--agg", train.agg, "Aggregation: mean or sum");
  t->add_flag("--tiny", train.tiny, "Desk-scale geometry: 32-frame slices, depth 5, base width 8");
  t->add_option("--steps", train.steps, "Total optimizer steps");
  t->add_option("--batch", train.batch, "Slices per batch");
  t->add_option("--lr", train.lr, "Adam learning rate");
  t->add_option("--seed", train.seed, "Training seed");
  t->add_option("--checkpoint-every", train.checkpoint_every, "Steps between checkpoints");
  t->add_option("--val-fraction", train.val_fraction, "Share of records held out for validation");
  t->add_flag("--resume", train.resume, "Continue from <out>/last.ckpt");

  Enhance enh;
  auto* e = app.add_subcommand("enhance", "Dereverberate with a trained checkpoint");
  e->add_option("--ckpt", enh.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--inputs", enh.inputs, "Microphone WAVs of one utterance")->check(CLI::ExistingFile);
  e->add_option("--manifest", enh.manifest, "Enhance every record of a manifest")->check(CLI::ExistingFile);
  e->add_option("--out", enh.out, "Output WAV (--inputs) or directory (--manifest)");
  e->add_flag("--restore-gain", enh.restore_gain, "Undo the input RMS normalization");

  Wpe wpe;
  auto* w = app.add_subcommand("wpe", "Weighted prediction error baseline");
  w->add_option("--inputs", wpe.inputs, "Microphone WAVs of one utterance")->check(CLI::ExistingFile);
  w->add_option("--manifest", wpe.manifest, "Process every record of a manifest")->check(CLI::ExistingFile);
  w->add_option("--out", wpe.out, "Output directory")->required();
  w->add_option("--name", wpe.name, "Output file stem for --inputs");
  w->add_option("--taps", wpe.taps, "Prediction filter length in frames");
  w->add_option("--delay", wpe.delay, "Prediction delay in frames");
  w->add_option("--iters", wpe.iters, "Iterations");

  Evaluate ev;
  auto* v = app.add_subcommand("evaluate", "Score outputs with CD and FWSegSNR");
  v->add_option("--manifest", ev.manifest, "Manifest with clean references");
  auto* outs = v->add_option("--outputs", ev.outputs, "Directory of enhanced WAVs");
  v->add_flag("--reverberant", ev.reverberant, "Score the unprocessed microphones")->excludes(outs);
  v->add_option("--report", ev.report, "Write the JSON report here");

  SelfTest st;
  auto* s = app.add_subcommand("self-test", "Run the invariant checks");
  s->add_flag("--quick", st.quick, "Reduced sample sizes, under two minutes (default)");
  s->add_flag("--full", st.full, "Full sample sizes plus overfit and end-to-end training");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kConfig;
  }

  if (g->parsed()) return guarded([&] { return gen.run(common); });
  if (t->parsed()) return guarded([&] { return train.run(common); });
  if (e->parsed()) return guarded([&] { return enh.run(); });
  if (w->parsed()) return guarded([&] { return wpe.run(common); });
  if (v->parsed()) return guarded([&] { return ev.run(common); });
  if (s->parsed()) return guarded([&] { return st.run(common); });
  return kConfig;
}
