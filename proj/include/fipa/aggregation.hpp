#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fipa/curvature.hpp"
#include "fipa/mlp.hpp"

namespace fipa {

enum class AggregationRule { fedavg, fipa_dense, fipa_qr };

const char* to_string(AggregationRule rule);
AggregationRule parse_aggregation_rule(const std::string& name);

struct ServerConfig {
  AggregationRule rule = AggregationRule::fedavg;
  double beta_reg = 0.0;
  double gamma = 1.0;

  void validate() const;
};

// Payload sizes in bytes (8-byte reals).
std::uint64_t payload_bytes_up(Eigen::Index p_eff, int rank, bool with_sketch);
std::uint64_t payload_bytes_down(Eigen::Index p);

// One client's upload. `delta` is full length p with zeros on frozen
// coordinates; the sketch basis lives on the trainable coordinates.
struct ClientUpdate {
  int client_id = 0;
  Eigen::Index n_samples = 0;
  Vector delta;
  std::optional<FisherSketch> sketch;
  std::uint64_t bytes_up = 0;
};

struct SolveDiagnostics {
  int r_tot = 0;
  double condition = 0.0;      // of K + beta I
  double off_subspace = 0.0;   // ||(I - Q Q^T) b|| / ||b||
  bool fedavg_fallback = false;
};

struct AggregationResult {
  ParamVector theta;
  AggregationRule applied = AggregationRule::fedavg;
  SolveDiagnostics diagnostics;
};

// theta + sum_m (N_m / N) delta_m, accumulated in client-id order.
ParamVector fedavg_aggregate(const ParamVector& theta, std::span<const ClientUpdate> updates);

// B_m = w_m Hhat^+ Hhat_m with Hhat = sum_m w_m Hhat_m, w_m = sketch weight.
// With beta > 0, (Hhat + beta I)^{-1} replaces the pseudoinverse.
std::vector<Matrix> fipa_weights_dense(std::span<const FisherSketch> sketches, double beta = 0.0,
                                       Eigen::Index cap = kDefaultDenseCap);

// theta + gamma sum_m B_m delta_m.
ParamVector fipa_aggregate_dense(const ParamVector& theta, std::span<const ClientUpdate> updates,
                                 const ServerConfig& cfg, Eigen::Index cap = kDefaultDenseCap);

// Same update through a thin QR of the stacked client bases and an
// r_tot x r_tot regularized solve. Requires beta > 0.
AggregationResult fipa_aggregate_qr(const ParamVector& theta, std::span<const ClientUpdate> updates,
                                    const ServerConfig& cfg);

// Dispatches on cfg.rule. FIPA rules fall back to FedAvg when every sketch is
// empty (r_tot = 0).
AggregationResult aggregate(const ParamVector& theta, std::span<const ClientUpdate> updates,
                            const ServerConfig& cfg);

}  // namespace fipa
