#include "gpmpc/cli.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "gpmpc/validation.hpp"

namespace gpmpc::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidInput(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw InvalidInput(where + ": unknown key '" + key + "'");
  }
}

double get_number(const json& j, const std::string& field) {
  if (!j.is_number()) throw InvalidInput(field + ": expected a number");
  return j.get<double>();
}

int get_int(const json& j, const std::string& field) {
  if (!j.is_number_integer()) throw InvalidInput(field + ": expected an integer");
  return j.get<int>();
}

// null entries stand for an unbounded side.
Vector get_vector(const json& j, const std::string& field, int size, double null_value = kInf) {
  if (!j.is_array() || static_cast<int>(j.size()) != size) {
    throw InvalidInput(field + ": expected an array of " + std::to_string(size) + " numbers");
  }
  Vector v(size);
  for (int i = 0; i < size; ++i) {
    if (j[i].is_null() && std::isinf(null_value)) {
      v(i) = null_value;
    } else {
      v(i) = get_number(j[i], field + "[" + std::to_string(i) + "]");
    }
  }
  return v;
}

// Either a diagonal (flat array) or a full square matrix.
Matrix get_weight(const json& j, const std::string& field, int size) {
  if (j.is_array() && !j.empty() && j[0].is_array()) {
    if (static_cast<int>(j.size()) != size) throw InvalidInput(field + ": expected " + std::to_string(size) + " rows");
    Matrix m(size, size);
    for (int i = 0; i < size; ++i) m.row(i) = get_vector(j[i], field, size, 0.0).transpose();
    return m;
  }
  return get_vector(j, field, size, 0.0).asDiagonal();
}

std::string resolve(const std::string& path, const std::string& base_dir) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

void parse_mpc(const json& j, MpcConfig& c) {
  check_keys(j, {"horizon", "q", "r", "u_min", "u_max", "x_min", "x_max", "confidence", "tightening",
                 "sqp_max_iterations", "sqp_tolerance", "sqp_radius_max", "sqp_gauss_newton_start"},
             "mpc");
  if (j.contains("horizon")) c.horizon = get_int(j["horizon"], "mpc.horizon");
  if (j.contains("q")) c.q_mat = get_weight(j["q"], "mpc.q", kPlantStates);
  if (j.contains("r")) c.r_mat = get_weight(j["r"], "mpc.r", kPlantInputs);
  if (j.contains("u_min")) c.u_min = get_vector(j["u_min"], "mpc.u_min", kPlantInputs, 0.0);
  if (j.contains("u_max")) c.u_max = get_vector(j["u_max"], "mpc.u_max", kPlantInputs, 0.0);
  if (j.contains("x_min")) c.x_min = get_vector(j["x_min"], "mpc.x_min", kPlantStates, -kInf);
  if (j.contains("x_max")) c.x_max = get_vector(j["x_max"], "mpc.x_max", kPlantStates, kInf);
  if (j.contains("confidence")) c.confidence = get_number(j["confidence"], "mpc.confidence");
  if (j.contains("tightening")) c.tightening = parse_tightening(j["tightening"].get<std::string>());
  if (j.contains("sqp_max_iterations")) c.sqp_max_iterations = get_int(j["sqp_max_iterations"], "mpc.sqp_max_iterations");
  if (j.contains("sqp_tolerance")) c.sqp_tolerance = get_number(j["sqp_tolerance"], "mpc.sqp_tolerance");
  if (j.contains("sqp_radius_max")) c.sqp_radius_max = get_number(j["sqp_radius_max"], "mpc.sqp_radius_max");
  if (j.contains("sqp_gauss_newton_start")) {
    if (!j["sqp_gauss_newton_start"].is_boolean()) throw InvalidInput("mpc.sqp_gauss_newton_start: expected a boolean");
    c.sqp_gauss_newton_start = j["sqp_gauss_newton_start"].get<bool>();
  }
}

void parse_excitation_spec(const json& j, ExcitationSpec& e) {
  check_keys(j, {"policy", "u_low", "u_high", "samples", "hold", "script"}, "excitation");
  if (j.contains("policy")) e.policy = parse_excitation(j["policy"].get<std::string>());
  if (j.contains("u_low")) e.u_low = get_vector(j["u_low"], "excitation.u_low", kPlantInputs, 0.0);
  if (j.contains("u_high")) e.u_high = get_vector(j["u_high"], "excitation.u_high", kPlantInputs, 0.0);
  if (j.contains("samples")) e.samples = get_int(j["samples"], "excitation.samples");
  if (j.contains("hold")) e.hold = get_int(j["hold"], "excitation.hold");
  if (j.contains("script")) {
    if (!j["script"].is_array()) throw InvalidInput("excitation.script: expected an array");
    e.script.clear();
    for (const json& u : j["script"]) e.script.push_back(get_vector(u, "excitation.script", kPlantInputs, 0.0));
  }
}

void parse_training(const json& j, TrainingConfig& t) {
  check_keys(j, {"max_iterations", "restarts", "tolerance", "min_noise_ratio"}, "training");
  if (j.contains("max_iterations")) t.max_iterations = get_int(j["max_iterations"], "training.max_iterations");
  if (j.contains("restarts")) t.restarts = get_int(j["restarts"], "training.restarts");
  if (j.contains("tolerance")) t.tolerance = get_number(j["tolerance"], "training.tolerance");
  if (j.contains("min_noise_ratio")) t.min_noise_ratio = get_number(j["min_noise_ratio"], "training.min_noise_ratio");
}

std::vector<double> get_list(const json& j, const std::string& field) {
  if (!j.is_array()) throw InvalidInput(field + ": expected an array");
  std::vector<double> out;
  for (const json& v : j) out.push_back(get_number(v, field));
  return out;
}

void parse_step_reference(const json& j, StepReferenceSpec& s) {
  check_keys(j, {"switches", "y1_levels", "y2_levels"}, "step_reference");
  if (j.contains("switches")) {
    s.switches.clear();
    for (double v : get_list(j["switches"], "step_reference.switches")) s.switches.push_back(static_cast<int>(v));
  }
  if (j.contains("y1_levels")) s.y1_levels = get_list(j["y1_levels"], "step_reference.y1_levels");
  if (j.contains("y2_levels")) s.y2_levels = get_list(j["y2_levels"], "step_reference.y2_levels");
  if (s.switches.size() != s.y1_levels.size() || s.switches.size() != s.y2_levels.size()) {
    throw InvalidInput("step_reference: switches and level lists differ in length");
  }
}

void parse_lorenz_reference(const json& j, LorenzReferenceSpec& s) {
  check_keys(j, {"sigma", "rho", "beta", "dt", "stride", "initial", "burn_in", "y1_low", "y1_high", "y2_low",
                 "y2_high"},
             "lorenz_reference");
  if (j.contains("sigma")) s.sigma = get_number(j["sigma"], "lorenz_reference.sigma");
  if (j.contains("rho")) s.rho = get_number(j["rho"], "lorenz_reference.rho");
  if (j.contains("beta")) s.beta = get_number(j["beta"], "lorenz_reference.beta");
  if (j.contains("dt")) s.dt = get_number(j["dt"], "lorenz_reference.dt");
  if (j.contains("stride")) s.stride = get_int(j["stride"], "lorenz_reference.stride");
  if (j.contains("initial")) s.initial = get_vector(j["initial"], "lorenz_reference.initial", 3, 0.0);
  if (j.contains("burn_in")) s.burn_in = get_int(j["burn_in"], "lorenz_reference.burn_in");
  if (j.contains("y1_low")) s.y1_low = get_number(j["y1_low"], "lorenz_reference.y1_low");
  if (j.contains("y1_high")) s.y1_high = get_number(j["y1_high"], "lorenz_reference.y1_high");
  if (j.contains("y2_low")) s.y2_low = get_number(j["y2_low"], "lorenz_reference.y2_low");
  if (j.contains("y2_high")) s.y2_high = get_number(j["y2_high"], "lorenz_reference.y2_high");
  if (s.dt <= 0.0 || s.stride < 1 || s.burn_in < 0) throw InvalidInput("lorenz_reference: dt, stride or burn_in out of range");
}

std::string read_file(const std::string& path, const std::string& field) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput(field + ": cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

ojson vector_json(const Vector& v) {
  ojson a = ojson::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vector json_vector(const json& j, const std::string& field) {
  if (!j.is_array()) throw InvalidInput(field + ": expected an array");
  Vector v(static_cast<int>(j.size()));
  for (int i = 0; i < v.size(); ++i) v(i) = get_number(j[i], field);
  return v;
}

GpModel run_model(const RunConfig& cfg, TrainingReport* report, GpDataset* data_out) {
  GpDataset data = run_dataset(cfg);
  TrainingConfig tc = cfg.spec.training;
  tc.seed = training_seed(cfg.seed);
  GpModel model = train(data, tc, report);
  if (data_out) *data_out = std::move(data);
  return model;
}

int count_control_violations(const TrajectoryLog& log, const MpcConfig& mpc) {
  int n = 0;
  for (const LogRow& row : log.rows) {
    n += ((row.control.array() < mpc.u_min.array()) || (row.control.array() > mpc.u_max.array())).count();
  }
  return n;
}

double safe_ratio(double value, double base) {
  if (base == value) return 1.0;
  return value / base;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InvalidInput(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    check_keys(j, {"task", "controller", "seed", "trials", "steps", "data_fraction", "noise_std", "output_dir",
                   "dataset", "model", "record_timing", "mpc", "excitation", "training", "step_reference",
                   "lorenz_reference"},
               "config");
    const Task task = j.contains("task") ? parse_task(j["task"].get<std::string>()) : Task::Step;
    cfg.spec = default_experiment(task);
    if (j.contains("controller")) cfg.controller = parse_controller(j["controller"].get<std::string>());
    if (j.contains("seed")) {
      if (!j["seed"].is_number_unsigned()) throw InvalidInput("seed: expected a non-negative integer");
      cfg.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("trials")) cfg.trials = get_int(j["trials"], "trials");
    if (j.contains("steps")) cfg.spec.steps = get_int(j["steps"], "steps");
    if (j.contains("data_fraction")) cfg.spec.data_fraction = get_number(j["data_fraction"], "data_fraction");
    if (j.contains("noise_std")) cfg.spec.noise_std = get_number(j["noise_std"], "noise_std");
    if (j.contains("output_dir")) cfg.output_dir = resolve(j["output_dir"].get<std::string>(), base_dir);
    if (j.contains("dataset")) cfg.dataset_path = resolve(j["dataset"].get<std::string>(), base_dir);
    if (j.contains("model")) cfg.model_path = resolve(j["model"].get<std::string>(), base_dir);
    if (j.contains("record_timing")) {
      if (!j["record_timing"].is_boolean()) throw InvalidInput("record_timing: expected a boolean");
      cfg.record_solve_time = j["record_timing"].get<bool>();
    }
    if (j.contains("mpc")) parse_mpc(j["mpc"], cfg.spec.mpc);
    if (j.contains("excitation")) parse_excitation_spec(j["excitation"], cfg.spec.excitation);
    if (j.contains("training")) parse_training(j["training"], cfg.spec.training);
    if (j.contains("step_reference")) parse_step_reference(j["step_reference"], cfg.spec.step_reference);
    if (j.contains("lorenz_reference")) parse_lorenz_reference(j["lorenz_reference"], cfg.spec.lorenz_reference);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("config has a value of the wrong type: ") + e.what());
  }
  if (cfg.trials < 1) throw InvalidInput("trials must be at least 1");
  if (!cfg.dataset_path.empty() && !fs::is_regular_file(cfg.dataset_path)) {
    throw InvalidInput("dataset: file '" + cfg.dataset_path + "' does not exist");
  }
  cfg.spec.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  const std::string text = read_file(path, "--config");
  return parse_run_config(text, fs::path(path).parent_path().string());
}

void apply_overrides(RunConfig& cfg, const Overrides& ov) {
  if (ov.out) cfg.output_dir = *ov.out;
  if (ov.seed) cfg.seed = *ov.seed;
}

GpDataset run_dataset(const RunConfig& cfg) {
  GpDataset full = cfg.dataset_path.empty()
                       ? collect_training_data(cfg.spec.excitation, data_seed(cfg.seed), cfg.spec.noise_std)
                       : parse_dataset_csv(read_file(cfg.dataset_path, "dataset"));
  return fraction_head(full, cfg.spec.data_fraction);
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto t0 = Clock::now();
  TrainingReport report;
  GpDataset data;
  const GpModel model = run_model(cfg, &report, &data);
  const double wall = std::chrono::duration<double>(Clock::now() - t0).count();

  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  model.save((dir / "model.json").string());
  write_file(dir / "dataset.csv", dataset_csv(data));

  const Vector mse = training_mse(model, data);
  ojson doc;
  doc["task"] = task_name(cfg.spec.task);
  doc["seed"] = cfg.seed;
  doc["samples"] = data.size();
  // Outputs are x1 and x3; the full per-state errors follow.
  doc["training_mse"] = ojson::array({mse(0), mse(2)});
  doc["training_mse_states"] = vector_json(mse);
  doc["log_likelihood"] = report.final_likelihood;
  doc["wall_seconds"] = cfg.record_solve_time ? wall : 0.0;
  write_file(dir / "train_report.json", doc.dump(1) + "\n");

  char buf[160];
  std::snprintf(buf, sizeof buf, "trained on %d samples, training MSE y1 %.3e y2 %.3e, %.2f s\n", data.size(), mse(0),
                mse(2), wall);
  log << buf;
  return kExitOk;
}

int cmd_simulate(const RunConfig& cfg, int jobs, std::ostream& log) {
  if (jobs < 1) throw InvalidInput("--jobs must be at least 1");
  const GpModel model = cfg.model_path.empty() ? run_model(cfg, nullptr, nullptr) : GpModel::load(cfg.model_path);
  if (model.state_dim() != kPlantStates || model.control_dim() != kPlantInputs) {
    throw InvalidInput("model: expected 4 states and 2 controls");
  }
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  write_file(dir / "reference.csv", reference_csv(experiment_reference_outputs(cfg.spec)));

  RunOptions options;
  options.record_solve_time = cfg.record_solve_time;
  std::vector<TrialResult> results(cfg.trials);
  std::vector<std::string> worker_errors(cfg.trials);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int t = next++; t < cfg.trials; t = next++) {
      try {
        results[t] = run_trial(cfg.spec, model, cfg.controller, cfg.seed, t, options);
        char name[32];
        std::snprintf(name, sizeof name, "trial_%03d.csv", t);
        write_file(dir / name, trajectory_csv(results[t].log));
      } catch (const std::exception& e) {
        worker_errors[t] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::min(jobs, cfg.trials); ++w) pool.emplace_back(worker);
  worker();
  for (std::thread& th : pool) th.join();
  for (int t = 0; t < cfg.trials; ++t) {
    if (!worker_errors[t].empty()) throw Error("trial " + std::to_string(t) + ": " + worker_errors[t]);
  }

  ojson trials = ojson::array();
  Vector sum_mse = Vector::Zero(kPlantOutputs), sum_iae = Vector::Zero(kPlantOutputs);
  double sum_ms = 0.0;
  int failed = 0;
  for (int t = 0; t < cfg.trials; ++t) {
    const TrialResult& r = results[t];
    const bool ok = !r.log.failed && static_cast<int>(r.log.rows.size()) == cfg.spec.steps;
    ojson e;
    e["trial"] = t;
    e["seed"] = trial_seed(cfg.seed, t);
    e["completed_steps"] = r.log.rows.size();
    e["failed"] = !ok;
    e["error"] = r.log.error;
    e["control_violations"] = count_control_violations(r.log, cfg.spec.mpc);
    e["mse"] = r.log.rows.empty() ? ojson(nullptr) : vector_json(r.metrics.mse);
    e["iae"] = r.log.rows.empty() ? ojson(nullptr) : vector_json(r.metrics.iae);
    e["mean_solve_ms"] = r.mean_solve_ms;
    trials.push_back(e);
    if (!ok) {
      ++failed;
      continue;
    }
    sum_mse += r.metrics.mse;
    sum_iae += r.metrics.iae;
    sum_ms += r.mean_solve_ms;
  }
  const int good = cfg.trials - failed;
  ojson doc;
  doc["task"] = task_name(cfg.spec.task);
  doc["controller"] = controller_name(cfg.controller);
  doc["seed"] = cfg.seed;
  doc["steps"] = cfg.spec.steps;
  doc["horizon"] = cfg.spec.mpc.horizon;
  doc["trials"] = cfg.trials;
  doc["failed"] = failed;
  doc["mean_mse"] = good > 0 ? vector_json(sum_mse / good) : ojson(nullptr);
  doc["mean_iae"] = good > 0 ? vector_json(sum_iae / good) : ojson(nullptr);
  doc["mean_solve_ms"] = good > 0 ? ojson(sum_ms / good) : ojson(nullptr);
  doc["per_trial"] = trials;
  write_file(dir / "metrics.json", doc.dump(1) + "\n");

  char buf[200];
  if (good > 0) {
    std::snprintf(buf, sizeof buf, "%s on %s: %d/%d trials ok, MSE %.4g %.4g, IAE %.4g %.4g, %.3f ms/step\n",
                  controller_name(cfg.controller).c_str(), task_name(cfg.spec.task).c_str(), good, cfg.trials,
                  sum_mse(0) / good, sum_mse(1) / good, sum_iae(0) / good, sum_iae(1) / good, sum_ms / good);
  } else {
    std::snprintf(buf, sizeof buf, "%s on %s: every trial failed\n", controller_name(cfg.controller).c_str(),
                  task_name(cfg.spec.task).c_str());
  }
  log << buf;
  return 10 * failed > cfg.trials ? kExitFailure : kExitOk;
}

RunSummary read_run_summary(const std::string& run_dir) {
  const fs::path path = fs::path(run_dir) / "metrics.json";
  if (!fs::is_directory(run_dir)) throw InvalidInput("run directory '" + run_dir + "' does not exist");
  if (!fs::is_regular_file(path)) throw InvalidInput("run directory '" + run_dir + "' has no metrics.json");
  json j;
  try {
    j = json::parse(read_file(path.string(), "metrics"));
    RunSummary s;
    s.task = j.at("task").get<std::string>();
    s.controller = j.at("controller").get<std::string>();
    s.trials = j.at("trials").get<int>();
    s.failed = j.at("failed").get<int>();
    if (j.at("mean_mse").is_null()) throw InvalidInput(path.string() + ": run has no successful trials");
    s.mean_mse = json_vector(j.at("mean_mse"), "mean_mse");
    s.mean_iae = json_vector(j.at("mean_iae"), "mean_iae");
    s.mean_solve_ms = j.at("mean_solve_ms").get<double>();
    return s;
  } catch (const json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

std::string compare_csv(const std::vector<RunSummary>& runs, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << "run,controller,task,mse_y1,mse_y2,iae_y1,iae_y2,solve_ms,"
         "mse_y1_ratio,mse_y2_ratio,iae_y1_ratio,iae_y2_ratio,solve_time_ratio\n";
  const RunSummary& base = runs.front();
  char buf[512];
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const RunSummary& r = runs[i];
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  names[i].c_str(), r.controller.c_str(), r.task.c_str(), r.mean_mse(0), r.mean_mse(1), r.mean_iae(0),
                  r.mean_iae(1), r.mean_solve_ms, safe_ratio(r.mean_mse(0), base.mean_mse(0)),
                  safe_ratio(r.mean_mse(1), base.mean_mse(1)), safe_ratio(r.mean_iae(0), base.mean_iae(0)),
                  safe_ratio(r.mean_iae(1), base.mean_iae(1)), safe_ratio(r.mean_solve_ms, base.mean_solve_ms));
    out << buf;
  }
  return out.str();
}

std::string compare_text(const std::vector<RunSummary>& runs, const std::vector<std::string>& names) {
  std::ostringstream out;
  const RunSummary& base = runs.front();
  char buf[512];
  std::snprintf(buf, sizeof buf, "task %s, ratios against %s (%s)\n", base.task.c_str(), names.front().c_str(),
                base.controller.c_str());
  out << buf;
  std::snprintf(buf, sizeof buf, "%-24s %-8s %10s %10s %10s %10s %12s %10s\n", "run", "ctrl", "mse_y1", "mse_y2",
                "iae_y1", "iae_y2", "ms/step", "time x");
  out << buf;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const RunSummary& r = runs[i];
    std::snprintf(buf, sizeof buf, "%-24s %-8s %10.4g %10.4g %10.4g %10.4g %12.4g %10.3g\n", names[i].c_str(),
                  r.controller.c_str(), r.mean_mse(0), r.mean_mse(1), r.mean_iae(0), r.mean_iae(1), r.mean_solve_ms,
                  safe_ratio(r.mean_solve_ms, base.mean_solve_ms));
    out << buf;
  }
  return out.str();
}

int cmd_compare(const std::vector<std::string>& run_dirs, const std::string& out_dir, std::ostream& log) {
  if (run_dirs.size() < 2) throw InvalidInput("compare needs at least two run directories");
  std::vector<RunSummary> runs;
  std::vector<std::string> names;
  for (const std::string& d : run_dirs) {
    runs.push_back(read_run_summary(d));
    names.push_back(fs::path(d).lexically_normal().filename().string());
    if (names.back().empty()) names.back() = d;
    if (runs.back().task != runs.front().task) {
      throw InvalidInput("runs cover different tasks: " + runs.front().task + " and " + runs.back().task);
    }
  }
  const std::string text = compare_text(runs, names);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "comparison.csv", compare_csv(runs, names));
    write_file(fs::path(out_dir) / "comparison.txt", text);
  }
  log << text;
  return kExitOk;
}

int cmd_validate(std::uint64_t seed, int jobs, const std::string& out_dir, std::ostream& log) {
  if (jobs < 1) throw InvalidInput("--jobs must be at least 1");
  ValidationOptions opts;
  opts.seed = seed;
  opts.jobs = jobs;
  const std::vector<SuiteResult> results = run_validation(opts);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "validation.json", validation_report_json(results));
  }
  log << validation_report_text(results);
  bool all = true;
  for (const SuiteResult& r : results) all = all && r.passed;
  return all ? kExitOk : kExitFailure;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gaussian-process MPC experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "run configuration (JSON)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "master seed");
  };
  CLI::App* train_cmd = app.add_subcommand("train", "fit the GP model and write model.json");
  add_common(train_cmd, true);
  CLI::App* sim_cmd = app.add_subcommand("simulate", "closed-loop trials, per-trial CSVs and metrics.json");
  add_common(sim_cmd, true);
  CLI::App* cmp_cmd = app.add_subcommand("compare", "ratio table between simulate runs");
  add_common(cmp_cmd, false);
  cmp_cmd->add_option("runs", run_dirs, "run directories, the first is the baseline")->required();
  CLI::App* val_cmd = app.add_subcommand("validate", "cross-module oracle suites");
  add_common(val_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    Overrides ov;
    if (!out_dir.empty()) ov.out = out_dir;
    if (!app.get_subcommands().front()->get_option("--seed")->empty()) ov.seed = seed;
    ov.jobs = jobs;
    if (train_cmd->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      apply_overrides(cfg, ov);
      return cmd_train(cfg, out);
    }
    if (sim_cmd->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      apply_overrides(cfg, ov);
      return cmd_simulate(cfg, jobs, out);
    }
    if (cmp_cmd->parsed()) return cmd_compare(run_dirs, out_dir, out);
    ValidationOptions defaults;
    return cmd_validate(ov.seed ? *ov.seed : defaults.seed, jobs, out_dir, out);
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace gpmpc::cli
