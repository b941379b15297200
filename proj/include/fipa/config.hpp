#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace fipa {

struct ProblemConfig {
  std::string kind = "sine";  // sine | gaussian_mixture | poisson | elliptic | blobs
  int frequency = 2;          // sine: sin(frequency * pi * x)
  int dim = 1;                // poisson
  double beta_bc = 100.0;     // poisson, elliptic
  std::string elliptic = "allen_cahn";
  double coefficient = 1.0;
  std::uint64_t mixture_seed = 0;
  int mixture_components = 6;
  int classes = 10;  // blobs
  int features = 8;
  int train_per_class = 100;
  int test_per_class = 100;
  double spread = 3.0;

  bool operator==(const ProblemConfig&) const = default;
};

struct ModelConfig {
  std::vector<int> hidden{32, 32};
  std::string activation = "tanh";
  // 0-based layer indices to train; empty trains everything.
  std::vector<int> trainable_layers;

  bool operator==(const ModelConfig&) const = default;
};

struct PartitionConfig {
  std::string kind = "interval";  // interval | grid | dirichlet
  std::vector<double> proportions;
  int rows = 1;
  int cols = 1;
  double alpha = 0.5;
  int samples_per_client = 1000;
  int boundary_per_client = 2;

  bool operator==(const PartitionConfig&) const = default;
};

struct SketchSection {
  int rank = 16;
  int oversampling = 5;
  int passes = 4;
  double energy_threshold = 1.0;

  bool operator==(const SketchSection&) const = default;
};

struct FederationConfig {
  int clients = 2;
  PartitionConfig partition;
  int rounds = 100;  // including warmup
  int warmup_rounds = 0;
  std::string rule = "fipa_qr";
  double beta_reg = 1e-3;
  double gamma = 1.0;
  int local_epochs = 5;
  std::string optimizer = "adam";
  double lr = 1e-3;
  int batch_size = 0;
  double prox_mu = 0.0;
  double participation_fraction = 1.0;
  int workers = 1;
  bool exact_curvature = false;
  bool full_curvature = false;
  SketchSection sketch;

  bool operator==(const FederationConfig&) const = default;
};

struct DiagnosticsConfig {
  bool gn_reference = false;
  double gn_gamma = 0.5;

  bool operator==(const DiagnosticsConfig&) const = default;
};

struct OutputConfig {
  std::string dir = "runs/default";
  std::vector<std::string> formats{"csv", "json"};
  bool record_wall_time = false;

  bool operator==(const OutputConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ProblemConfig problem;
  ModelConfig model;
  FederationConfig federation;
  DiagnosticsConfig diagnostics;
  OutputConfig output;

  bool operator==(const ExperimentConfig&) const = default;
};

struct ConfigIssue {
  std::string path;
  std::string message;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<ConfigIssue> issues);
  const std::vector<ConfigIssue>& issues() const { return issues_; }

 private:
  std::vector<ConfigIssue> issues_;
};

// Strict: unknown keys, type mismatches and constraint violations are all
// collected and thrown together as a ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig config_from_json(const nlohmann::json& doc);

nlohmann::json config_to_json(const ExperimentConfig& cfg);
std::string serialize_config(const ExperimentConfig& cfg);

// Constraint checks only; the parser already calls this.
std::vector<ConfigIssue> validate_config(const ExperimentConfig& cfg);

// Sets a dotted path ("federation.lr") in a config document, creating
// intermediate objects.
void set_config_path(nlohmann::json& doc, const std::string& dotted, const nlohmann::json& value);

}  // namespace fipa
