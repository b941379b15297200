#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fipa/runner.hpp"

using namespace fipa;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fipa_test_runner_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig small_config() {
  ExperimentConfig cfg = parse_config(R"({
    "seed": 3,
    "problem": {"kind": "sine"},
    "model": {"hidden": [6]},
    "federation": {"clients": 2, "partition": {"samples_per_client": 40}, "rounds": 5, "warmup_rounds": 2,
                   "rule": "fipa_qr", "gamma": 0.5, "lr": 0.01, "workers": 2, "sketch": {"rank": 3}},
    "diagnostics": {"gn_reference": true}
  })");
  return cfg;
}

}  // namespace

TEST_CASE("rounds.csv has the fixed header and one row per round") {
  const fs::path dir = scratch_dir("schema");
  const ExperimentConfig cfg = small_config();
  const RunOutput out = run_config(cfg, dir);
  const auto rows = parse_csv(slurp(dir / "rounds.csv"));
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == std::vector<std::string>{"k", "rule", "train_loss_mean", "test_metric", "bytes_up", "bytes_down",
                                            "r_tot", "rho_hat", "e_k", "delta_k", "wall_ms"});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 11);
    CHECK(rows[i][0] == std::to_string(i));
    CHECK(rows[i][1] == (i <= 2 ? "fedavg" : "fipa_qr"));
    CHECK(rows[i][10].empty());  // wall time off by default
    if (i <= 2) CHECK(rows[i][8].empty());
    else CHECK_FALSE(rows[i][8].empty());
  }
  // Reals round-trip exactly through the CSV.
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    CHECK(std::strtod(rows[i + 1][3].c_str(), nullptr) == out.records[i].test_metric);
    CHECK(std::strtod(rows[i + 1][2].c_str(), nullptr) == out.records[i].train_loss_mean);
  }
  fs::remove_all(dir);
}

TEST_CASE("two runs of one config give byte-identical rounds.csv") {
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  ExperimentConfig cfg = small_config();
  run_config(cfg, a);
  cfg.federation.workers = 1;  // worker count does not change results
  run_config(cfg, b);
  CHECK(slurp(a / "rounds.csv") == slurp(b / "rounds.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("summary numbers are reproducible from rounds.csv") {
  const fs::path dir = scratch_dir("summary");
  const ExperimentConfig cfg = small_config();
  run_config(cfg, dir);
  const json s = json::parse(slurp(dir / "summary.json"));
  const auto rows = parse_csv(slurp(dir / "rounds.csv"));
  double best = 1e300;
  int best_round = 0;
  std::uint64_t up = 0, down = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double m = std::strtod(rows[i][3].c_str(), nullptr);
    if (m < best) {
      best = m;
      best_round = std::stoi(rows[i][0]);
    }
    up += std::stoull(rows[i][4]);
    down += std::stoull(rows[i][5]);
  }
  CHECK(s["final"]["test_metric"].get<double>() == std::strtod(rows.back()[3].c_str(), nullptr));
  CHECK(s["final"]["train_loss_mean"].get<double>() == std::strtod(rows.back()[2].c_str(), nullptr));
  CHECK(s["best"]["test_metric"].get<double>() == best);
  CHECK(s["best"]["round"].get<int>() == best_round);
  CHECK(s["totals"]["bytes_up"].get<std::uint64_t>() == up);
  CHECK(s["totals"]["bytes_down"].get<std::uint64_t>() == down);
  CHECK(s["rounds"].get<int>() == 5);
  CHECK(s["seed"].get<std::uint64_t>() == 3);
  CHECK(s.contains("build_id"));
  CHECK(config_from_json(s["config"]) == cfg);
  fs::remove_all(dir);
}

TEST_CASE("best metric respects higher-is-better for classification") {
  const fs::path dir = scratch_dir("blobs");
  const ExperimentConfig cfg = parse_config(R"({
    "seed": 2,
    "problem": {"kind": "blobs", "classes": 3, "features": 2, "train_per_class": 20, "test_per_class": 20},
    "model": {"hidden": [4]},
    "federation": {"clients": 3, "partition": {"kind": "dirichlet", "alpha": 0.5}, "rounds": 4,
                   "rule": "fedavg", "lr": 0.05},
    "output": {"formats": ["json"], "record_wall_time": true}
  })");
  const RunOutput out = run_config(cfg, dir);
  double best = -1.0;
  for (const auto& r : out.records) best = std::max(best, r.test_metric);
  CHECK(out.summary["best"]["test_metric"].get<double>() == best);
  CHECK(out.summary["higher_is_better"].get<bool>());
  CHECK(fs::exists(dir / "summary.json"));
  CHECK_FALSE(fs::exists(dir / "rounds.csv"));
  fs::remove_all(dir);
}

TEST_CASE("wall time is written only on request") {
  std::vector<RoundRecord> recs(1);
  recs[0].round = 1;
  recs[0].wall_ms = 12.5;
  CHECK(rounds_csv(recs, false).find("12.5") == std::string::npos);
  CHECK(rounds_csv(recs, true).find(",12.5\n") != std::string::npos);
}

TEST_CASE("atomic write replaces the file and leaves no temporary behind") {
  const fs::path dir = scratch_dir("atomic");
  fs::create_directories(dir);
  write_file_atomic(dir / "f.txt", "first");
  write_file_atomic(dir / "f.txt", "second");
  CHECK(slurp(dir / "f.txt") == "second");
  int files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  CHECK(files == 1);
  CHECK_THROWS(write_file_atomic(dir / "missing" / "f.txt", "x"));
  fs::remove_all(dir);
}

TEST_CASE("output directory precedence: flag, then environment, then config") {
  ExperimentConfig cfg;
  cfg.output.dir = "from_config";
  ::unsetenv(kOutputDirEnv);
  CHECK(resolve_output_dir(cfg, std::nullopt) == "from_config");
  ::setenv(kOutputDirEnv, "from_env", 1);
  CHECK(resolve_output_dir(cfg, std::nullopt) == "from_env");
  CHECK(resolve_output_dir(cfg, std::string("from_flag")) == "from_flag");
  ::unsetenv(kOutputDirEnv);
}

TEST_CASE("sweep value splitting and directory suffixes") {
  CHECK(split_values("0.1, 0.2,0.3") == std::vector<std::string>{"0.1", "0.2", "0.3"});
  CHECK(split_values("[4],[4,4]") == std::vector<std::string>{"[4]", "[4,4]"});
  CHECK(split_values(R"("a,b",c)") == std::vector<std::string>{R"("a,b")", "c"});
  CHECK(sweep_dir("runs/x/", "federation.lr", "0.01") == "runs/x_lr-0.01");
  CHECK(sweep_dir("runs/x", "model.hidden", "[4,4]") == "runs/x_hidden-_4_4_");
}

TEST_CASE("invalid configs are rejected before any compute") {
  ExperimentConfig cfg = small_config();
  cfg.federation.participation_fraction = 0.0;
  const fs::path dir = scratch_dir("invalid");
  CHECK_THROWS_AS(run_config(cfg, dir), ConfigError);
  CHECK_FALSE(fs::exists(dir));
}
