#include "fipa/gn_reference.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fipa/linalg.hpp"

namespace fipa {

ResidualFn centralized_residuals(const MlpSpec& spec, const Problem& problem, std::span<const ClientData> clients) {
  return [&spec, &problem, clients](const Vector& theta) { return problem.residual_system(spec, theta, clients); };
}

GnState gn_step(const ResidualFn& residuals, const ParamVector& theta, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("GN damping must be > 0");
  const ResidualBlock rb = residuals(theta.values());
  const Matrix j = theta.gather_columns(rb.jacobian);
  Matrix h = j.transpose() * j;
  h = 0.5 * (h + h.transpose());
  const Vector g = j.transpose() * rb.residual;

  const linalg::EigenDecomposition eig = linalg::sym_eig(h);
  GnState out;
  out.h_max_eig = eig.values.size() > 0 ? eig.values(0) : 0.0;
  out.h_min_eig = eig.values.size() > 0 ? eig.values(eig.values.size() - 1) : 0.0;
  if (!(out.h_max_eig > 0.0)) {
    throw linalg::LinalgError("GN step: Gauss-Newton matrix is zero (max eigenvalue " +
                              std::to_string(out.h_max_eig) + ")");
  }
  out.pseudoinverse = out.h_min_eig <= 1e-12 * out.h_max_eig;
  const double cutoff = out.pseudoinverse ? 1e-10 * out.h_max_eig : 0.0;
  Vector coeff = eig.vectors.transpose() * g;
  for (Eigen::Index i = 0; i < coeff.size(); ++i) {
    coeff(i) = eig.values(i) > cutoff ? coeff(i) / eig.values(i) : 0.0;
  }
  const Vector step = -gamma * (eig.vectors * coeff);
  out.theta = theta;
  out.theta.add_to_trainable(step);
  out.step_norm = step.norm();
  out.loss = 0.5 * residuals(out.theta.values()).residual.squaredNorm();
  return out;
}

std::vector<GnState> gn_trajectory(const ResidualFn& residuals, const ParamVector& theta0, double gamma,
                                   int rounds) {
  if (rounds < 1) throw std::invalid_argument("GN trajectory needs at least one step");
  std::vector<GnState> traj;
  GnState start;
  start.theta = theta0;
  start.loss = 0.5 * residuals(theta0.values()).residual.squaredNorm();
  traj.push_back(start);
  for (int k = 1; k <= rounds; ++k) {
    GnState next = gn_step(residuals, traj.back().theta, gamma);
    next.k = k;
    traj.push_back(std::move(next));
  }
  return traj;
}

double contraction_estimate(std::span<const double> history) {
  if (history.size() < 3) throw std::invalid_argument("contraction estimate needs at least 3 points");
  const std::size_t start = history.size() / 2;
  const std::size_t n = history.size() - start;
  double sk = 0.0, sy = 0.0;
  std::vector<double> ys;
  for (std::size_t i = start; i < history.size(); ++i) {
    if (!(history[i] > 0.0)) throw std::invalid_argument("contraction estimate needs positive values");
    ys.push_back(std::log(history[i]));
    sk += static_cast<double>(i);
    sy += ys.back();
  }
  const double kbar = sk / static_cast<double>(n);
  const double ybar = sy / static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double dk = static_cast<double>(start + t) - kbar;
    num += dk * (ys[t] - ybar);
    den += dk * dk;
  }
  return std::exp(num / den);
}

std::vector<GapRecord> gap_diagnostics(std::span<const Vector> federated, std::span<const Vector> reference,
                                       const std::function<Vector(const Vector&)>& gn_map) {
  if (federated.size() != reference.size()) throw std::invalid_argument("gap diagnostics: trajectory lengths differ");
  if (federated.empty()) return {};
  if (federated[0] != reference[0]) throw std::invalid_argument("gap diagnostics: trajectories must share theta_0");
  std::vector<GapRecord> out;
  for (std::size_t k = 0; k < federated.size(); ++k) {
    GapRecord r;
    r.k = static_cast<int>(k);
    r.e = (federated[k] - reference[k]).norm();
    if (k + 1 < federated.size()) r.delta = (federated[k + 1] - gn_map(federated[k])).norm();
    out.push_back(r);
  }
  return out;
}

double recursion_satisfaction(std::span<const GapRecord> gaps, double rho, double slack) {
  if (gaps.size() < 2) throw std::invalid_argument("recursion check needs at least two records");
  const std::size_t start = (gaps.size() - 1) / 2;
  std::size_t ok = 0, total = 0;
  for (std::size_t k = start; k + 1 < gaps.size(); ++k) {
    ++total;
    if (gaps[k + 1].e <= rho * gaps[k].e + gaps[k].delta + slack) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(total);
}

}  // namespace fipa
