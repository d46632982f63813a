#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gpmpc/plant_bench.hpp"

namespace gpmpc::cli {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;

// JSON run description. Every key is optional; absent keys take the task
// defaults of default_experiment. Unknown keys are rejected.
struct RunConfig {
  ExperimentSpec spec;
  ControllerKind controller = ControllerKind::Gpmpc2;
  std::uint64_t seed = 42;
  int trials = 50;
  std::string output_dir = "run";
  std::string dataset_path;  // empty: collect with the excitation policy
  std::string model_path;    // simulate: empty trains in-process
  bool record_solve_time = true;
};

/// Relative paths inside the document are resolved against `base_dir`.
RunConfig parse_run_config(const std::string& json_text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

/// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

void apply_overrides(RunConfig& cfg, const Overrides& ov);

/// Training data for a run: the dataset file if given, otherwise collected.
/// Either way only the first ⌈fraction·D⌉ rows are kept.
GpDataset run_dataset(const RunConfig& cfg);

int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_simulate(const RunConfig& cfg, int jobs, std::ostream& log);
int cmd_compare(const std::vector<std::string>& run_dirs, const std::string& out_dir, std::ostream& log);
int cmd_validate(std::uint64_t seed, int jobs, const std::string& out_dir, std::ostream& log);

struct RunSummary {
  std::string task;
  std::string controller;
  int trials = 0;
  int failed = 0;
  Vector mean_mse;
  Vector mean_iae;
  double mean_solve_ms = 0.0;
};

RunSummary read_run_summary(const std::string& run_dir);

/// Ratio table of every run against the first one.
std::string compare_csv(const std::vector<RunSummary>& runs, const std::vector<std::string>& names);
std::string compare_text(const std::vector<RunSummary>& runs, const std::vector<std::string>& names);

/// Parses argv and dispatches. Returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace gpmpc::cli
