#include "fipa/aggregation.hpp"

#include <algorithm>
#include <stdexcept>

#include "fipa/linalg.hpp"

namespace fipa {

namespace {

std::vector<const ClientUpdate*> sorted_by_id(std::span<const ClientUpdate> updates, Eigen::Index p) {
  if (updates.empty()) throw std::invalid_argument("aggregation needs at least one client update");
  std::vector<const ClientUpdate*> out;
  out.reserve(updates.size());
  for (const ClientUpdate& u : updates) {
    if (u.delta.size() != p) {
      throw std::invalid_argument("client " + std::to_string(u.client_id) + " update has length " +
                                  std::to_string(u.delta.size()) + ", expected " + std::to_string(p));
    }
    if (u.n_samples <= 0) throw std::invalid_argument("client " + std::to_string(u.client_id) + " has no samples");
    out.push_back(&u);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  return out;
}

std::vector<double> sample_weights(const std::vector<const ClientUpdate*>& ups) {
  double total = 0.0;
  for (const ClientUpdate* u : ups) total += static_cast<double>(u->n_samples);
  std::vector<double> w;
  w.reserve(ups.size());
  for (const ClientUpdate* u : ups) w.push_back(static_cast<double>(u->n_samples) / total);
  return w;
}

const FisherSketch& require_sketch(const ClientUpdate& u, Eigen::Index p_eff) {
  if (!u.sketch) throw std::invalid_argument("client " + std::to_string(u.client_id) + " sent no curvature sketch");
  if (u.sketch->basis.rows() != p_eff || u.sketch->basis.cols() != u.sketch->eigenvalues.size()) {
    throw std::invalid_argument("client " + std::to_string(u.client_id) + " sketch has inconsistent dimensions");
  }
  return *u.sketch;
}

// b = sum_m w_m U_m Lambda_m U_m^T delta_m on the trainable coordinates.
Vector curvature_weighted_sum(const ParamVector& theta, const std::vector<const ClientUpdate*>& ups,
                              const std::vector<double>& w) {
  Vector b = Vector::Zero(theta.trainable_count());
  for (std::size_t m = 0; m < ups.size(); ++m) {
    const FisherSketch& s = require_sketch(*ups[m], theta.trainable_count());
    const Vector coeff = s.eigenvalues.cwiseProduct(s.basis.transpose() * theta.gather(ups[m]->delta));
    b.noalias() += w[m] * (s.basis * coeff);
  }
  return b;
}

}  // namespace

const char* to_string(AggregationRule rule) {
  switch (rule) {
    case AggregationRule::fedavg:
      return "fedavg";
    case AggregationRule::fipa_dense:
      return "fipa_dense";
    case AggregationRule::fipa_qr:
      return "fipa_qr";
  }
  return "?";
}

AggregationRule parse_aggregation_rule(const std::string& name) {
  if (name == "fedavg") return AggregationRule::fedavg;
  if (name == "fipa_dense") return AggregationRule::fipa_dense;
  if (name == "fipa_qr") return AggregationRule::fipa_qr;
  throw std::invalid_argument("unknown aggregation rule '" + name + "'");
}

void ServerConfig::validate() const {
  if (!(beta_reg >= 0.0)) throw std::invalid_argument("beta_reg must be >= 0");
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be > 0");
  if (rule == AggregationRule::fipa_qr && !(beta_reg > 0.0)) {
    throw std::invalid_argument("fipa_qr needs beta_reg > 0; use fipa_dense for beta = 0");
  }
}

std::uint64_t payload_bytes_up(Eigen::Index p_eff, int rank, bool with_sketch) {
  const auto p = static_cast<std::uint64_t>(p_eff);
  if (!with_sketch) return 8 * p;
  const auto r = static_cast<std::uint64_t>(rank);
  return 8 * (p + p * r + r);
}

std::uint64_t payload_bytes_down(Eigen::Index p) { return 8 * static_cast<std::uint64_t>(p); }

ParamVector fedavg_aggregate(const ParamVector& theta, std::span<const ClientUpdate> updates) {
  const auto ups = sorted_by_id(updates, theta.size());
  const std::vector<double> w = sample_weights(ups);
  Vector step = Vector::Zero(theta.trainable_count());
  for (std::size_t m = 0; m < ups.size(); ++m) step += w[m] * theta.gather(ups[m]->delta);
  ParamVector out = theta;
  out.add_to_trainable(step);
  return out;
}

std::vector<Matrix> fipa_weights_dense(std::span<const FisherSketch> sketches, double beta, Eigen::Index cap) {
  if (sketches.empty()) throw std::invalid_argument("fipa_weights_dense: no sketches");
  const Eigen::Index p = sketches.front().basis.rows();
  if (p > cap) throw CurvatureError("dense FIPA weights requested for p = " + std::to_string(p) + " above the cap");
  Matrix h = Matrix::Zero(p, p);
  std::vector<Matrix> hm;
  for (const FisherSketch& s : sketches) {
    if (s.basis.rows() != p) throw std::invalid_argument("fipa_weights_dense: sketches disagree on p");
    hm.push_back(s.dense());
    h += s.weight * hm.back();
  }
  h = 0.5 * (h + h.transpose());
  Matrix inv;
  if (beta > 0.0) {
    inv = (h + beta * Matrix::Identity(p, p)).ldlt().solve(Matrix::Identity(p, p));
  } else {
    inv = linalg::pinv_sym(h);
  }
  std::vector<Matrix> b;
  for (std::size_t m = 0; m < sketches.size(); ++m) b.push_back(sketches[m].weight * inv * hm[m]);
  return b;
}

ParamVector fipa_aggregate_dense(const ParamVector& theta, std::span<const ClientUpdate> updates,
                                 const ServerConfig& cfg, Eigen::Index cap) {
  cfg.validate();
  const auto ups = sorted_by_id(updates, theta.size());
  const Eigen::Index p_eff = theta.trainable_count();
  if (p_eff > cap) throw CurvatureError("dense FIPA requested for p = " + std::to_string(p_eff) + " above the cap");
  const std::vector<double> w = sample_weights(ups);

  // sum_m B_m delta_m = Hhat^+ b, so only Hhat itself is needed.
  Matrix h = Matrix::Zero(p_eff, p_eff);
  for (std::size_t m = 0; m < ups.size(); ++m) {
    const FisherSketch& s = require_sketch(*ups[m], p_eff);
    h.noalias() += w[m] * s.dense();
  }
  h = 0.5 * (h + h.transpose());
  const Vector b = curvature_weighted_sum(theta, ups, w);
  const Vector step = cfg.beta_reg > 0.0 ? linalg::solve_regularized(h, cfg.beta_reg, b)
                                         : Vector(linalg::pinv_sym(h) * b);
  ParamVector out = theta;
  out.add_to_trainable(cfg.gamma * step);
  return out;
}

AggregationResult fipa_aggregate_qr(const ParamVector& theta, std::span<const ClientUpdate> updates,
                                    const ServerConfig& cfg) {
  cfg.validate();
  if (!(cfg.beta_reg > 0.0)) throw std::invalid_argument("fipa_qr needs beta_reg > 0");
  const auto ups = sorted_by_id(updates, theta.size());
  const Eigen::Index p_eff = theta.trainable_count();
  const std::vector<double> w = sample_weights(ups);

  Eigen::Index r_tot = 0;
  for (const ClientUpdate* u : ups) r_tot += require_sketch(*u, p_eff).rank();

  AggregationResult res;
  res.diagnostics.r_tot = static_cast<int>(r_tot);
  if (r_tot == 0) {
    res.theta = fedavg_aggregate(theta, updates);
    res.applied = AggregationRule::fedavg;
    res.diagnostics.fedavg_fallback = true;
    return res;
  }
  if (r_tot > p_eff) {
    throw std::invalid_argument("stacked sketch rank " + std::to_string(r_tot) + " exceeds p_eff = " +
                                std::to_string(p_eff) + "; lower the rank or use fipa_dense");
  }

  Matrix v(p_eff, r_tot);
  Vector sigma(r_tot);
  Eigen::Index at = 0;
  for (std::size_t m = 0; m < ups.size(); ++m) {
    const FisherSketch& s = *ups[m]->sketch;
    v.middleCols(at, s.rank()) = s.basis;
    sigma.segment(at, s.rank()) = w[m] * s.eigenvalues;
    at += s.rank();
  }
  const linalg::QrResult qr = linalg::qr_thin(v);
  Matrix k = qr.r * sigma.asDiagonal() * qr.r.transpose();
  k = 0.5 * (k + k.transpose());
  const Vector b = curvature_weighted_sum(theta, ups, w);
  const Vector qtb = qr.q.transpose() * b;
  const Vector z = linalg::solve_regularized(k, cfg.beta_reg, qtb);
  const Vector perp = b - qr.q * qtb;
  const Vector step = qr.q * z + perp / cfg.beta_reg;

  res.theta = theta;
  res.theta.add_to_trainable(cfg.gamma * step);
  res.applied = AggregationRule::fipa_qr;
  res.diagnostics.condition = linalg::condition_estimate(k + cfg.beta_reg * Matrix::Identity(r_tot, r_tot));
  const double bn = b.norm();
  res.diagnostics.off_subspace = bn > 0.0 ? perp.norm() / bn : 0.0;
  return res;
}

AggregationResult aggregate(const ParamVector& theta, std::span<const ClientUpdate> updates,
                            const ServerConfig& cfg) {
  cfg.validate();
  AggregationResult res;
  if (cfg.rule == AggregationRule::fedavg) {
    res.theta = fedavg_aggregate(theta, updates);
    return res;
  }
  if (cfg.rule == AggregationRule::fipa_qr) return fipa_aggregate_qr(theta, updates, cfg);

  int r_tot = 0;
  for (const ClientUpdate& u : updates) r_tot += require_sketch(u, theta.trainable_count()).rank();
  res.diagnostics.r_tot = r_tot;
  if (r_tot == 0) {
    res.theta = fedavg_aggregate(theta, updates);
    res.diagnostics.fedavg_fallback = true;
    return res;
  }
  res.theta = fipa_aggregate_dense(theta, updates, cfg);
  res.applied = AggregationRule::fipa_dense;
  return res;
}

}  // namespace fipa
