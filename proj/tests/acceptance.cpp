// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Acceptance gate: one PASS/FAIL line per criterion. Criteria 1-9 run by
// default; --extended adds the end-to-end training run (criterion 10).

#include <CLI11.hpp>

#include <iostream>
#include <thread>

#include "dssdrv/verify.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dssdrv acceptance checks"};
  std::vector<int> only;
  bool extended = false;
  dssdrv::VerifyOptions opts;
  opts.jobs = static_cast<int>(std::max(1u, std::min(4u, std::thread::hardware_concurrency())));
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_flag("--extended", extended, "Include the end-to-end training run");
  app.add_option("--jobs", opts.jobs, "Worker threads for data generation, WPE and scoring")->check(CLI::PositiveNumber);
  app.add_option("--e2e-steps", opts.e2e_steps, "Training steps for the end-to-end run")->check(CLI::PositiveNumber);
  app.add_option("--e2e-utterances", opts.e2e_utterances, "Utterances generated for the end-to-end run");
  app.add_option("--work-dir", opts.work_dir, "Scratch directory");
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress output for long checks");
  CLI11_PARSE(app, argc, argv);
  if (verbose) opts.log = &std::cerr;

  if (only.empty()) {
    for (int i = 1; i <= 9; ++i) only.push_back(i);
    if (extended) only.push_back(10);
  }
  try {
    const auto results = dssdrv::run_checks(only, opts, std::cout);
    int failed = 0;
    for (const auto& r : results) failed += r.passed ? 0 : 1;
    std::cout << (failed ? "FAIL" : "PASS") << " acceptance: " << results.size() - failed << "/" << results.size()
              << " criteria met" << std::endl;
    return failed ? 1 : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
