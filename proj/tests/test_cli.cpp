#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gpmpc/cli.hpp"
#include "test_util.hpp"

using namespace gpmpc;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("gpmpc_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& s) const { return path_ / s; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "gpmpc");
  std::vector<char*> argv;
  for (std::string& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

// Small and fast: 60 training samples, short horizon, few steps.
std::string small_config(const std::string& task, const std::string& controller, int trials, int steps) {
  nlohmann::json j = {{"task", task},
                      {"controller", controller},
                      {"seed", 5},
                      {"trials", trials},
                      {"steps", steps},
                      {"record_timing", false},
                      {"excitation", {{"samples", 60}}},
                      {"training", {{"restarts", 2}}}};
  return j.dump();
}

}  // namespace

TEST(RunConfig, DefaultsFollowTask) {
  const cli::RunConfig cfg = cli::parse_run_config("{\"task\": \"lorenz\"}");
  EXPECT_EQ(cfg.spec.task, Task::Lorenz);
  EXPECT_EQ(cfg.trials, 50);
  EXPECT_EQ(cfg.spec.mpc.u_min(1), -7.0);
  EXPECT_EQ(cfg.controller, ControllerKind::Gpmpc2);
}

TEST(RunConfig, FullDocument) {
  const std::string text = R"({
    "task": "step", "controller": "gpmpc1", "seed": 9, "trials": 3, "steps": 40,
    "data_fraction": 0.8, "noise_std": 0.05, "output_dir": "out",
    "mpc": {"horizon": 6, "q": [1, 1, 2, 2], "r": [[1, 0], [0, 3]], "x_min": [null, -5, -5, -5],
            "tightening": "two-std", "sqp_tolerance": 1e-7},
    "excitation": {"policy": "prbs", "hold": 2, "u_high": [0.4, 0.4]},
    "training": {"restarts": 2, "min_noise_ratio": 1e-5},
    "step_reference": {"switches": [5, 20], "y1_levels": [1, 2], "y2_levels": [0.5, 0.7]}
  })";
  const cli::RunConfig cfg = cli::parse_run_config(text, "/base");
  EXPECT_EQ(cfg.controller, ControllerKind::Gpmpc1);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.spec.mpc.horizon, 6);
  EXPECT_EQ(cfg.spec.mpc.q_mat(3, 3), 2.0);
  EXPECT_EQ(cfg.spec.mpc.r_mat(1, 1), 3.0);
  EXPECT_TRUE(std::isinf(cfg.spec.mpc.x_min(0)) && cfg.spec.mpc.x_min(0) < 0);
  EXPECT_EQ(cfg.spec.mpc.tightening, TighteningMode::TwoStd);
  EXPECT_EQ(cfg.spec.excitation.policy, ExcitationPolicy::Prbs);
  EXPECT_EQ(cfg.spec.training.restarts, 2);
  EXPECT_EQ(cfg.spec.step_reference.switches.size(), 2u);
  EXPECT_EQ(cfg.output_dir, "/base/out");
}

TEST(RunConfig, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(cli::parse_run_config("{\"tsak\": \"step\"}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"mpc\": {\"horizn\": 3}}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"training\": {\"lr\": 3}}"), InvalidInput);
}

TEST(RunConfig, WrongTypesAndValuesRejected) {
  EXPECT_THROW(cli::parse_run_config("{\"trials\": \"many\"}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"trials\": 0}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"mpc\": {\"q\": [1, 2]}}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"data_fraction\": 1.5}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("not json"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"controller\": \"pid\"}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"task\": 3}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("{\"excitation\": {\"policy\": 3}}"), InvalidInput);
  EXPECT_THROW(cli::parse_run_config("[1, 2]"), InvalidInput);
}

TEST(RunConfig, MissingDatasetNamesField) {
  TempDir dir;
  spit(dir / "c.json", "{\"dataset\": \"nope.csv\"}");
  std::string err;
  EXPECT_EQ(run_cli({"train", "--config", (dir / "c.json").string()}, nullptr, &err), cli::kExitInvalid);
  EXPECT_NE(err.find("dataset"), std::string::npos);
}

TEST(Cli, BadArgumentsExitTwo) {
  EXPECT_EQ(run_cli({}), cli::kExitInvalid);
  EXPECT_EQ(run_cli({"fly"}), cli::kExitInvalid);
  EXPECT_EQ(run_cli({"train"}), cli::kExitInvalid);
  EXPECT_EQ(run_cli({"train", "--config", "/nonexistent/x.json"}), cli::kExitInvalid);
  EXPECT_EQ(run_cli({"--help"}), cli::kExitOk);
}

TEST(Cli, TrainReportAndByteIdenticalRetrain) {
  TempDir dir;
  spit(dir / "c.json", small_config("step", "gpmpc2", 1, 10));
  ASSERT_EQ(run_cli({"train", "--config", (dir / "c.json").string(), "--out", (dir / "a").string()}), 0);
  ASSERT_EQ(run_cli({"train", "--config", (dir / "c.json").string(), "--out", (dir / "b").string()}), 0);
  EXPECT_EQ(slurp(dir / "a/model.json"), slurp(dir / "b/model.json"));
  EXPECT_EQ(slurp(dir / "a/train_report.json"), slurp(dir / "b/train_report.json"));
  const auto report = nlohmann::json::parse(slurp(dir / "a/train_report.json"));
  ASSERT_EQ(report["training_mse"].size(), 2u);
  for (const auto& v : report["training_mse"]) EXPECT_TRUE(std::isfinite(v.get<double>()));
  EXPECT_TRUE(report.contains("wall_seconds"));
  // The saved dataset trains the same model.
  nlohmann::json c = nlohmann::json::parse(small_config("step", "gpmpc2", 1, 10));
  c["dataset"] = (dir / "a/dataset.csv").string();
  spit(dir / "d.json", c.dump());
  ASSERT_EQ(run_cli({"train", "--config", (dir / "d.json").string(), "--out", (dir / "c").string()}), 0);
  EXPECT_EQ(slurp(dir / "a/model.json"), slurp(dir / "c/model.json"));
  // A different seed gives a different model.
  ASSERT_EQ(run_cli({"train", "--config", (dir / "c.json").string(), "--out", (dir / "e").string(), "--seed", "6"}), 0);
  EXPECT_NE(slurp(dir / "a/model.json"), slurp(dir / "e/model.json"));
}

TEST(Cli, SimulateOneTrialOneCsv) {
  TempDir dir;
  spit(dir / "c.json", small_config("step", "gpmpc2", 1, 15));
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "c.json").string(), "--out", (dir / "run").string()}), 0);
  int csvs = 0;
  for (const auto& e : fs::directory_iterator(dir / "run"))
    csvs += e.path().filename().string().rfind("trial_", 0) == 0;
  EXPECT_EQ(csvs, 1);
  EXPECT_TRUE(fs::exists(dir / "run/reference.csv"));
  const std::string csv = slurp(dir / "run/trial_000.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 16);
}

TEST(Cli, AggregateIsMeanOfTrials) {
  TempDir dir;
  spit(dir / "c.json", small_config("step", "gpmpc2", 3, 20));
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "c.json").string(), "--out", (dir / "run").string()}), 0);
  const auto m = nlohmann::json::parse(slurp(dir / "run/metrics.json"));
  ASSERT_EQ(m["per_trial"].size(), 3u);
  for (int o = 0; o < 2; ++o) {
    double sum = 0;
    for (const auto& t : m["per_trial"]) sum += t["mse"][o].get<double>();
    EXPECT_NEAR(m["mean_mse"][o].get<double>(), sum / 3, 1e-12);
  }
  EXPECT_EQ(m["failed"].get<int>(), 0);
}

TEST(Cli, SimulateDeterministicAcrossRunsAndJobs) {
  TempDir dir;
  spit(dir / "c.json", small_config("step", "gpmpc2", 3, 15));
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "c.json").string(), "--out", (dir / "a").string()}), 0);
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "c.json").string(), "--out", (dir / "b").string(), "--jobs", "3"}), 0);
  for (const char* f : {"metrics.json", "trial_000.csv", "trial_001.csv", "trial_002.csv", "reference.csv"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
}

TEST(Cli, Gpmpc2LorenzFullLength) {
  TempDir dir;
  nlohmann::json c = nlohmann::json::parse(small_config("lorenz", "gpmpc2", 1, 189));
  c.erase("excitation");
  spit(dir / "c.json", c.dump());
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "c.json").string(), "--out", (dir / "run").string()}), 0);
  const auto m = nlohmann::json::parse(slurp(dir / "run/metrics.json"));
  EXPECT_EQ(m["per_trial"][0]["completed_steps"].get<int>(), 189);
  EXPECT_EQ(m["per_trial"][0]["control_violations"].get<int>(), 0);
}

TEST(Cli, CompareSelfMismatchAndMissing) {
  TempDir dir;
  spit(dir / "s.json", small_config("step", "gpmpc2", 1, 10));
  spit(dir / "l.json", small_config("lorenz", "gpmpc2", 1, 10));
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "s.json").string(), "--out", (dir / "s").string()}), 0);
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "l.json").string(), "--out", (dir / "l").string()}), 0);

  ASSERT_EQ(run_cli({"compare", (dir / "s").string(), (dir / "s").string(), "--out", (dir / "cmp").string()}), 0);
  const std::string csv = slurp(dir / "cmp/comparison.csv");
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  EXPECT_NE(header.find("solve_time_ratio"), std::string::npos);
  while (std::getline(lines, row)) {
    std::vector<std::string> cells;
    std::stringstream ss(row);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 13u);
    for (std::size_t i = 8; i < 13; ++i) EXPECT_EQ(std::stod(cells[i]), 1.0);
  }
  EXPECT_TRUE(fs::exists(dir / "cmp/comparison.txt"));

  std::string err;
  EXPECT_EQ(run_cli({"compare", (dir / "s").string(), (dir / "l").string()}, nullptr, &err), cli::kExitInvalid);
  EXPECT_NE(err.find("different tasks"), std::string::npos);
  EXPECT_EQ(run_cli({"compare", (dir / "s").string(), (dir / "missing").string()}), cli::kExitInvalid);
  EXPECT_EQ(run_cli({"compare", (dir / "s").string()}), cli::kExitInvalid);
}

TEST(Cli, SimulateWithSavedModel) {
  TempDir dir;
  spit(dir / "c.json", small_config("step", "gpmpc2", 1, 10));
  ASSERT_EQ(run_cli({"train", "--config", (dir / "c.json").string(), "--out", (dir / "t").string()}), 0);
  nlohmann::json c = nlohmann::json::parse(small_config("step", "gpmpc2", 1, 10));
  c["model"] = "t/model.json";  // relative to the config file
  spit(dir / "m.json", c.dump());
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "m.json").string(), "--out", (dir / "a").string()}), 0);
  ASSERT_EQ(run_cli({"simulate", "--config", (dir / "c.json").string(), "--out", (dir / "b").string()}), 0);
  EXPECT_EQ(slurp(dir / "a/trial_000.csv"), slurp(dir / "b/trial_000.csv"));
}
