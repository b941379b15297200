#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "fipa/config.hpp"
#include "fipa/oracle.hpp"
#include "fipa/runner.hpp"

namespace {

using nlohmann::json;

constexpr int kRuntimeError = 1;
constexpr int kConfigError = 2;

int report(const fipa::ConfigError& e) {
  json issues = json::array();
  for (const auto& i : e.issues()) issues.push_back({{"path", i.path}, {"message", i.message}});
  std::cerr << json{{"error", "config"}, {"issues", issues}}.dump() << "\n";
  return kConfigError;
}

int report(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
  return kRuntimeError;
}

json read_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fipa::ConfigError({{"", "cannot read config file '" + path + "'"}});
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw fipa::ConfigError({{"", std::string("malformed document: ") + e.what()}});
  }
}

struct CommonOptions {
  std::string config_path;
  std::optional<int> workers;
  std::optional<std::string> out;
};

void apply_workers(json& doc, const CommonOptions& opts) {
  if (opts.workers) fipa::set_config_path(doc, "federation.workers", *opts.workers);
}

void run_one(const fipa::ExperimentConfig& cfg, const std::string& dir) {
  const fipa::RunOutput out = fipa::run_config(cfg, dir);
  const json& s = out.summary;
  std::cout << "wrote " << out.dir.string() << ": " << s["rounds"].get<int>() << " rounds, final "
            << s["metric"].get<std::string>() << " " << s["final"]["test_metric"].get<double>() << "\n";
}

int cmd_run(const CommonOptions& opts) {
  json doc = read_document(opts.config_path);
  apply_workers(doc, opts);
  const fipa::ExperimentConfig cfg = fipa::config_from_json(doc);
  run_one(cfg, fipa::resolve_output_dir(cfg, opts.out));
  return 0;
}

int cmd_sweep(const CommonOptions& opts, const std::string& param, const std::string& values) {
  json base = read_document(opts.config_path);
  apply_workers(base, opts);
  // Validate every point before running any of them.
  std::vector<std::pair<fipa::ExperimentConfig, std::string>> points;
  std::vector<fipa::ConfigIssue> issues;
  for (const std::string& text : fipa::split_values(values)) {
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;  // bare word: string value
    }
    json doc = base;
    try {
      fipa::set_config_path(doc, param, value);
      fipa::ExperimentConfig cfg = fipa::config_from_json(doc);
      points.emplace_back(cfg, fipa::sweep_dir(fipa::resolve_output_dir(cfg, opts.out), param, text));
    } catch (const fipa::ConfigError& e) {
      for (const auto& i : e.issues()) issues.push_back({i.path, i.message + " (value " + text + ")"});
    } catch (const std::invalid_argument& e) {
      issues.push_back({param, e.what()});
    }
  }
  if (!issues.empty()) throw fipa::ConfigError(std::move(issues));
  for (const auto& [cfg, dir] : points) run_one(cfg, dir);
  return 0;
}

int cmd_oracle_check(const std::string& perturb) {
  const auto results = fipa::run_oracle_suites(perturb);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::printf("%-30s %s  worst %.3e  tol %.1e  (%d checks)\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                r.worst, r.tolerance, r.checks);
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) return 0;
  std::cerr << json{{"error", "oracle"}, {"failed_suites", failed}}.dump() << "\n";
  return kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated simulator with Fisher-informed parameterwise aggregation"};
  app.require_subcommand(1);

  CommonOptions run_opts;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", run_opts.config_path, "Config file (JSON)")->required();
  run->add_option("--workers", run_opts.workers, "Worker threads for client training")->check(CLI::PositiveNumber);
  run->add_option("--out", run_opts.out, "Output directory (overrides FIPA_OUTPUT_DIR and output.dir)");

  CommonOptions sweep_opts;
  std::string sweep_param, sweep_values;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of a config parameter");
  sweep->add_option("config", sweep_opts.config_path, "Config file (JSON)")->required();
  sweep->add_option("--param", sweep_param, "Dotted config path, e.g. federation.lr")->required();
  sweep->add_option("--values", sweep_values, "Comma-separated values")->required();
  sweep->add_option("--workers", sweep_opts.workers, "Worker threads for client training")
      ->check(CLI::PositiveNumber);
  sweep->add_option("--out", sweep_opts.out, "Base output directory");

  std::string perturb;
  auto* oracle = app.add_subcommand("oracle-check", "Run the numerical oracle suites");
  oracle->add_option("--perturb", perturb, "Corrupt one suite (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (run->parsed()) return cmd_run(run_opts);
    if (sweep->parsed()) return cmd_sweep(sweep_opts, sweep_param, sweep_values);
    return cmd_oracle_check(perturb);
  } catch (const fipa::ConfigError& e) {
    return report(e);
  } catch (const std::exception& e) {
    return report("runtime", e.what());
  }
}
