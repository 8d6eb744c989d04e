#pragma once

// Ablation drivers and the gradient-check suite behind the CLI.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csim/data.hpp"
#include "csim/gradcheck.hpp"
#include "csim/trainer.hpp"

namespace csim {

/// One configuration: the base TrainConfig with `deltas` applied as
/// key-value assignments.
struct ExperimentRow {
  std::string id;
  std::string description;
  std::vector<std::pair<std::string, std::string>> deltas;
};

/// Component ablation on the two-branch graph (rows 1-7).
std::vector<ExperimentRow> component_rows();
/// S, D and SD interaction signals on the four-branch graph.
std::vector<ExperimentRow> matrix_rows();
/// Rows used by the confound experiment: both matrices above, the baseline,
/// CSA vs SDPA on the two-branch graph, and the triplet control.
std::vector<ExperimentRow> confound_rows();
/// Looks up rows by id across all matrices; "component", "matrix" and
/// "confound" expand to whole matrices.
std::vector<ExperimentRow> select_rows(std::span<const std::string> names);

TrainConfig apply_row(const TrainConfig& base, const ExperimentRow& row);
std::string describe_deltas(const ExperimentRow& row);

/// Small, fast configuration used by the confound sweep: 4x4 grid of 8x8
/// patches (32x32 images).
TrainConfig desk_train_config();
DatasetSpec desk_dataset_spec(std::uint64_t seed);

struct RunResult {
  std::string row;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double seconds = 0.0;
  std::string config;  // applied deltas
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t threads = 1;
  /// Called from worker threads under a lock after each run.
  std::function<void(const RunResult&)> on_result;
};

/// Every row x seed, independent runs; failures are recorded, not thrown.
std::vector<RunResult> ablate(const TrainConfig& base, std::span<const ExperimentRow> rows,
                              const DatasetSplits& data, const AblationOptions& options);

struct AblationSummary {
  std::string row;
  std::string description;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double mean_test = 0.0;
  double sd_test = 0.0;
  double mean_val = 0.0;
  double median_val = 0.0;
};
std::vector<AblationSummary> summarize(std::span<const ExperimentRow> rows, std::span<const RunResult> results);
void write_ablation_runs(std::ostream& out, std::span<const RunResult> results);
void write_ablation_summary(std::ostream& out, std::span<const AblationSummary> rows);

/// Worker count: CSIM_THREADS if set (must be a positive integer), capped by
/// the hardware concurrency and the job count.
std::size_t ablation_threads(std::size_t jobs);

/// Sign test: one-sided p-value of at least `wins` successes out of `n`
/// non-tied pairs under p = 1/2.
double sign_test_p(std::size_t wins, std::size_t n);

struct GradcheckSuiteOptions {
  std::uint64_t seed = 1;
  /// Seeds per primitive case.
  std::size_t repeats = 1;
  /// Adds a primitive whose backward rule is deliberately wrong.
  bool inject_fault = false;
  GradcheckOptions check;
};

struct GradcheckCase {
  std::string name;
  GradcheckReport report;
};

struct GradcheckSuiteReport {
  std::vector<GradcheckCase> cases;
  bool pass = true;
  /// |d loss / d theta| summed over levels for a mode-S four-branch model.
  double mode_s_theta_grad = 0.0;
  std::vector<std::string> failing() const;
};

/// The four-branch model checked by the suite: l = 16, c = 8, K = 3.
ModelConfig gradcheck_model_config();
GradcheckSuiteReport run_gradcheck_suite(const GradcheckSuiteOptions& options);

}  // namespace csim
