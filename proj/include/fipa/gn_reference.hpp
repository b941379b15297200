#pragma once

#include <functional>
#include <span>
#include <vector>

#include "fipa/elliptic.hpp"
#include "fipa/mlp.hpp"
#include "fipa/problems.hpp"

namespace fipa {

// Stacked residual xi(theta) and its full-parameter Jacobian.
using ResidualFn = std::function<ResidualBlock(const Vector& theta)>;

// Residual system of a problem over all client data (centralized view).
ResidualFn centralized_residuals(const MlpSpec& spec, const Problem& problem, std::span<const ClientData> clients);

struct GnState {
  int k = 0;
  ParamVector theta;
  double loss = 0.0;         // 0.5 ||xi||^2 at theta
  double step_norm = 0.0;    // ||theta_k - theta_{k-1}||, 0 at k = 0
  bool pseudoinverse = false;  // H was near-singular on the step into this state
  double h_min_eig = 0.0;
  double h_max_eig = 0.0;
};

// T_GN(theta) = theta - gamma H^{-1} g with H = J^T J, g = J^T xi on the
// trainable coordinates. A near-singular H (min eig <= 1e-12 max) is inverted
// with the 1e-10 pseudoinverse cutoff and flagged.
GnState gn_step(const ResidualFn& residuals, const ParamVector& theta, double gamma);

// theta_0 .. theta_K; element 0 is the shared starting point.
std::vector<GnState> gn_trajectory(const ResidualFn& residuals, const ParamVector& theta0, double gamma, int rounds);

// exp of the least-squares slope of log(value) against k over the last half
// of the history.
double contraction_estimate(std::span<const double> history);

struct GapRecord {
  int k = 0;
  double e = 0.0;      // ||theta_k - theta_GN_k||
  double delta = 0.0;  // ||theta_{k+1} - T_GN(theta_k)||, 0 for the last round
};

// Both trajectories hold theta_0 .. theta_K and must share theta_0.
std::vector<GapRecord> gap_diagnostics(std::span<const Vector> federated, std::span<const Vector> reference,
                                       const std::function<Vector(const Vector&)>& gn_map);

// Share of tail-window rounds (last half) with e_{k+1} <= rho e_k + delta_k + slack.
double recursion_satisfaction(std::span<const GapRecord> gaps, double rho, double slack = 1e-8);

}  // namespace fipa
