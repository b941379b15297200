#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fipa/config.hpp"
#include "fipa/federation.hpp"

namespace fipa {

inline constexpr const char* kOutputDirEnv = "FIPA_OUTPUT_DIR";

std::unique_ptr<Problem> make_problem(const ExperimentConfig& cfg);
MlpSpec make_model(const ExperimentConfig& cfg, const Problem& problem);
std::vector<ClientData> make_clients(const ExperimentConfig& cfg, const Problem& problem);
RoundConfig make_round_config(const ExperimentConfig& cfg);
Schedule make_schedule(const ExperimentConfig& cfg);

// --out beats the environment variable, which beats output.dir.
std::string resolve_output_dir(const ExperimentConfig& cfg, const std::optional<std::string>& cli_out);

// Header plus one row per record; reals with 17 significant digits, optional
// values left empty.
std::string rounds_csv(std::span<const RoundRecord> records, bool with_wall_time);

nlohmann::json run_summary(const ExperimentConfig& cfg, const Problem& problem,
                           std::span<const RoundRecord> records);

// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

struct RunOutput {
  std::filesystem::path dir;
  std::vector<RoundRecord> records;
  nlohmann::json summary;
};

// Builds everything from a validated config, runs it and writes the
// requested formats into `out_dir`.
RunOutput run_config(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

// Top-level comma split that keeps bracketed lists together: "1,[2,3]" ->
// {"1", "[2,3]"}.
std::vector<std::string> split_values(const std::string& list);

// Directory for one sweep point, e.g. runs/x + federation.lr=0.01 ->
// runs/x_lr-0.01.
std::string sweep_dir(const std::string& base, const std::string& param, const std::string& value);

}  // namespace fipa
