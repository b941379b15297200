#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fipa/aggregation.hpp"
#include "fipa/curvature.hpp"
#include "fipa/gn_reference.hpp"
#include "fipa/mlp.hpp"
#include "fipa/problems.hpp"

namespace fipa {

// ---------------------------------------------------------------- partitions

// Splits the problem domain along its first axis into M slabs (interval
// pieces for d = 1) with the given proportions, uniform when empty.
std::vector<ClientData> partition_interval(const Problem& problem, int clients, std::span<const double> proportions,
                                           Eigen::Index n_per_client, Eigen::Index n_boundary, std::uint64_t seed);

// rows x cols cells of the unit square; client i * cols + j owns
// [j/cols, (j+1)/cols] x [i/rows, (i+1)/rows].
std::vector<ClientData> partition_grid(const Problem& problem, int rows, int cols, Eigen::Index n_per_client,
                                       Eigen::Index n_boundary, std::uint64_t seed);

// Per label, client shares ~ Dirichlet(alpha 1_M), rounded by largest
// remainder. Empty clients take one sample from the largest client.
std::vector<ClientData> partition_dirichlet_labels(const Dataset& pool, int clients, double alpha,
                                                   std::uint64_t seed);

// ---------------------------------------------------------------- training

enum class LocalOptimizer { sgd, adam };
const char* to_string(LocalOptimizer opt);
LocalOptimizer parse_local_optimizer(const std::string& name);

struct RoundConfig {
  int local_epochs = 5;
  LocalOptimizer optimizer = LocalOptimizer::adam;
  double lr = 1e-3;
  int batch_size = 0;  // 0: full batch
  double prox_mu = 0.0;
  double participation_fraction = 1.0;
  SketchConfig sketch;
  // Top eigenpairs of the dense client Fisher instead of subspace iteration.
  bool exact_curvature = false;
  // Whole dense client Fisher (rank p_eff, no floor); overrides the above.
  bool full_curvature = false;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct LocalResult {
  Vector delta;  // full length, zero on frozen coordinates
  double final_loss = 0.0;
};

// tau epochs of the optimizer on F_m + (mu/2)||theta - theta_k||^2, fresh
// optimizer state. The proximal term enters through its prox map after each
// optimizer step: x <- theta_k + (x - theta_k) / (1 + lr mu). `rng` drives
// the mini-batch shuffles.
LocalResult local_train(const MlpSpec& spec, const Problem& problem, const ParamVector& theta,
                        const ClientData& client, const RoundConfig& cfg, std::mt19937_64& rng);

// Deterministic stream for (seed, round, client, purpose).
std::mt19937_64 stream_rng(std::uint64_t seed, int round, int client, int purpose);

// Sketch of the client Fisher at theta with the block size clamped to p_eff.
FisherSketch client_sketch(const MlpSpec& spec, const Problem& problem, const ParamVector& theta,
                           const ClientData& client, const RoundConfig& cfg, int round);

// ---------------------------------------------------------------- rounds

struct RoundRecord {
  int round = 0;
  AggregationRule rule = AggregationRule::fedavg;  // rule actually applied
  std::vector<int> participants;
  std::vector<double> train_losses;  // per participant, id order
  double train_loss_mean = 0.0;
  double test_metric = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::vector<int> ranks;  // per participant, empty for FedAvg
  SolveDiagnostics solve;
  double wall_ms = 0.0;
  // Gauss-Newton reference diagnostics, refinement rounds only.
  std::optional<double> rho_hat;
  std::optional<double> e_k;
  std::optional<double> delta_k;
};

// Samples participants, trains them from the broadcast theta (in parallel
// when cfg.workers > 1), sketches at the broadcast theta for FIPA rules and
// aggregates. Updates theta in place.
RoundRecord run_round(const MlpSpec& spec, const Problem& problem, std::span<const ClientData> clients,
                      ParamVector& theta, const RoundConfig& cfg, const ServerConfig& server, int round);

struct Schedule {
  int total_rounds = 1;
  int warmup_rounds = 0;  // FedAvg rounds before switching to `main`
  ServerConfig main;

  void validate() const;
};

struct GnDiagnosticsConfig {
  bool enabled = false;
  double gamma = 0.5;
};

struct ExperimentResult {
  std::vector<RoundRecord> records;
  ParamVector final_theta;
  ParamVector switch_theta;  // theta at the end of the warmup
  double initial_metric = 0.0;
};

using RoundObserver = std::function<void(const RoundRecord&, const ParamVector&)>;

ExperimentResult run_experiment(const MlpSpec& spec, const Problem& problem, std::span<const ClientData> clients,
                                const ParamVector& theta0, const RoundConfig& cfg, const Schedule& schedule,
                                const GnDiagnosticsConfig& gn = {}, const RoundObserver& observer = {});

// Continues from `theta` with `rounds` more rounds of `server`, numbering
// them from `first_round`.
ExperimentResult continue_experiment(const MlpSpec& spec, const Problem& problem,
                                     std::span<const ClientData> clients, const ParamVector& theta,
                                     const RoundConfig& cfg, const ServerConfig& server, int first_round, int rounds,
                                     const GnDiagnosticsConfig& gn = {}, const RoundObserver& observer = {});

// e_0 = 0 followed by one entry per round carrying Gauss-Newton diagnostics;
// entry k holds e_k and delta_k = ||theta_{k+1} - T_GN(theta_k)||.
std::vector<GapRecord> gap_history(std::span<const RoundRecord> records);

}  // namespace fipa
