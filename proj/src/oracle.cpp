#include "fipa/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "fipa/aggregation.hpp"
#include "fipa/curvature.hpp"
#include "fipa/elliptic.hpp"
#include "fipa/linalg.hpp"
#include "fipa/mlp.hpp"
#include "fipa/problems.hpp"

namespace fipa {

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Vector gaussian_vector(Eigen::Index n, std::uint64_t seed) { return gaussian(n, 1, seed).col(0); }

double rel(const Matrix& got, const Matrix& want) { return (got - want).norm() / std::max(1e-300, want.norm()); }

// Entrywise relative error, absolute below 1e-6 (scaled to the relative
// tolerance so one threshold covers both).
double entrywise(const Vector& got, const Vector& want, double tol) {
  double worst = 0.0;
  for (Eigen::Index k = 0; k < got.size(); ++k) {
    const double err = std::abs(got(k) - want(k));
    worst = std::max(worst, std::abs(want(k)) > 1e-6 ? err / std::abs(want(k)) : err * tol / 1e-8);
  }
  return worst;
}

Vector central_difference(const std::function<double(const Vector&)>& f, Vector theta, double h = 1e-5) {
  Vector g(theta.size());
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    const double t = theta(k);
    theta(k) = t + h;
    const double up = f(theta);
    theta(k) = t - h;
    const double down = f(theta);
    theta(k) = t;
    g(k) = (up - down) / (2.0 * h);
  }
  return g;
}

class Suite {
 public:
  Suite(std::string name, double tol, bool kick) : kick_(kick) {
    r_.name = std::move(name);
    r_.tolerance = tol;
  }
  // Applies the negative-control kick to a computed quantity.
  Matrix computed(Matrix m) const {
    if (kick_) m *= 1.0 + 10.0 * r_.tolerance;
    return m;
  }
  void record(double err) {
    r_.worst = std::max(r_.worst, err);
    ++r_.checks;
  }
  OracleSuiteResult finish() {
    r_.passed = r_.checks > 0 && r_.worst <= r_.tolerance;
    return r_;
  }

 private:
  bool kick_;
  OracleSuiteResult r_;
};

OracleSuiteResult fvp_suite(bool kick) {
  Suite s("fvp_vs_dense", 1e-10, kick);
  struct Case {
    MlpSpec spec;
    LossKind kind;
    int classes;
  };
  const std::vector<Case> cases{{MlpSpec::uniform({1, 8, 8, 1}, Activation::tanh), LossKind::mse, 0},
                                {MlpSpec::uniform({2, 6, 2}, Activation::tanh), LossKind::mse, 0},
                                {MlpSpec::uniform({3, 10, 4}, Activation::tanh), LossKind::softmax_ce, 4},
                                {MlpSpec::uniform({2, 7, 3}, Activation::relu), LossKind::softmax_ce, 3}};
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const Case& tc = cases[c];
    const ParamVector theta = init_params(tc.spec, 10 + c);
    Dataset data;
    data.inputs = gaussian(tc.spec.input_dim(), 30, 100 + c);
    if (tc.kind == LossKind::mse) {
      data.targets = gaussian(tc.spec.output_dim(), 30, 200 + c);
    } else {
      for (int i = 0; i < 30; ++i) data.labels.push_back(i % tc.classes);
    }
    const Matrix h = dense_fim(tc.spec, theta, data, tc.kind);
    for (int trial = 0; trial < 10; ++trial) {
      const Vector v = gaussian_vector(theta.size(), 1000 * c + trial);
      const Vector hv = s.computed(fim_vector_product(tc.spec, theta, data, tc.kind, v));
      s.record((hv - h * v).norm() / v.norm());
    }
  }
  // PDE operator: interior and boundary blocks.
  const MlpSpec pspec = MlpSpec::uniform({2, 6, 6, 1}, Activation::tanh);
  const ParamVector ptheta = init_params(pspec, 7);
  const Matrix interior = gaussian(2, 20, 8).cwiseAbs().cwiseMin(1.0);
  Matrix boundary(2, 4);
  boundary << 0.0, 1.0, 0.3, 0.6, 0.2, 0.9, 0.0, 1.0;
  const EllipticEquation eq = poisson_equation(2);
  const Matrix h = PdeFisher(pspec, ptheta, interior, boundary, eq, 100.0).dense();
  for (int trial = 0; trial < 10; ++trial) {
    const Vector v = gaussian_vector(ptheta.size(), 5000 + trial);
    const Vector hv = s.computed(pde_fim_vector_product(pspec, ptheta, interior, boundary, eq, 100.0, v));
    s.record((hv - h * v).norm() / (v.norm() * std::max(1.0, h.norm())));
  }
  return s.finish();
}

FisherSketch random_sketch(Eigen::Index p, int r, std::uint64_t seed) {
  FisherSketch s;
  s.basis = linalg::qr_thin(gaussian(p, r, seed)).q;
  s.eigenvalues = gaussian_vector(r, seed + 1).cwiseAbs().array() + 0.1;
  std::sort(s.eigenvalues.data(), s.eigenvalues.data() + r, std::greater<>());
  return s;
}

OracleSuiteResult qr_suite(bool kick) {
  Suite s("qr_vs_dense_aggregation", 1e-8, kick);
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = static_cast<Eigen::Index>(20 + rng() % 181);
    const int m_count = 1 + static_cast<int>(rng() % 5);
    const ParamVector theta(gaussian_vector(p, 1000 + trial));
    std::vector<ClientUpdate> ups;
    for (int m = 0; m < m_count; ++m) {
      ClientUpdate u;
      u.client_id = m;
      u.n_samples = 5 + static_cast<Eigen::Index>(rng() % 50);
      u.delta = gaussian_vector(p, 7 * trial + m);
      const int cap = std::min<int>(10, static_cast<int>(p) / m_count);  // QR path needs r_tot <= p
      u.sketch = random_sketch(p, 1 + static_cast<int>(rng() % cap), 3000 + 11 * trial + m);
      ups.push_back(std::move(u));
    }
    ServerConfig cfg{AggregationRule::fipa_qr, trial % 2 == 0 ? 1e-4 : 1e-2, 0.9};
    const Vector qr = s.computed(fipa_aggregate_qr(theta, ups, cfg).theta.values() - theta.values());
    cfg.rule = AggregationRule::fipa_dense;
    const Vector dense = fipa_aggregate_dense(theta, ups, cfg).values() - theta.values();
    s.record(rel(qr, dense));
  }
  return s.finish();
}

OracleSuiteResult gradient_suite(bool kick) {
  const double tol = 1e-5;
  Suite s("finite_difference_gradients", tol, kick);
  for (Activation act : {Activation::tanh, Activation::identity}) {
    const MlpSpec spec = MlpSpec::uniform({2, 6, 5, 3}, act);
    const Vector theta = init_params(spec, 11).values() + 0.1 * gaussian_vector(spec.param_count(), 12);
    const Vector x = gaussian_vector(2, 13);
    const Matrix j = s.computed(param_jacobian(spec, theta, x));
    for (int c = 0; c < 3; ++c) {
      const Vector fd = central_difference([&](const Vector& t) { return forward(spec, t, x)(c); }, theta);
      s.record(entrywise(j.row(c).transpose(), fd, tol));
    }
  }

  const MlpSpec spec = MlpSpec::uniform({2, 5, 3}, Activation::tanh);
  const Vector theta = init_params(spec, 21).values() + 0.2 * gaussian_vector(spec.param_count(), 22);
  Dataset reg;
  reg.inputs = gaussian(2, 7, 23);
  reg.targets = gaussian(3, 7, 24);
  Dataset cls;
  cls.inputs = gaussian(2, 9, 25);
  for (int i = 0; i < 9; ++i) cls.labels.push_back(i % 3);
  for (const auto& [data, kind] : {std::pair{&reg, LossKind::mse}, std::pair{&cls, LossKind::softmax_ce}}) {
    const Vector g = s.computed(loss_and_gradient(spec, theta, *data, kind).grad);
    const Vector fd = central_difference([&](const Vector& t) { return mean_loss(spec, t, *data, kind); }, theta);
    s.record(entrywise(g, fd, tol));
  }

  const MlpSpec pspec = MlpSpec::uniform({2, 5, 4, 1}, Activation::tanh);
  const Vector ptheta = init_params(pspec, 9).values();
  const Matrix interior = gaussian(2, 6, 3).cwiseAbs().cwiseMin(1.0);
  Matrix boundary(2, 3);
  boundary << 0.0, 0.4, 1.0, 0.3, 1.0, 0.8;
  const EllipticEquation poisson = poisson_equation(2);
  const Vector pg = s.computed(pde_loss_and_gradient(pspec, ptheta, interior, boundary, poisson, 50.0).grad);
  const Vector pfd = central_difference(
      [&](const Vector& t) { return pde_local_loss(pspec, t, interior, boundary, poisson, 50.0); }, ptheta);
  s.record(rel(pg, pfd));

  const MlpSpec espec = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  const Vector etheta = init_params(espec, 2).values();
  Matrix line(1, 5);
  line << 0.1, 0.3, 0.5, 0.7, 0.9;
  Matrix ends(1, 2);
  ends << 0.0, 1.0;
  for (EllipticKind kind : {EllipticKind::allen_cahn, EllipticKind::bratu, EllipticKind::fisher,
                            EllipticKind::reaction_diffusion}) {
    const EllipticEquation eq = nonlinear_elliptic_equation(kind);
    const Vector g = s.computed(pde_loss_and_gradient(espec, etheta, line, ends, eq, 10.0).grad);
    const Vector fd =
        central_difference([&](const Vector& t) { return pde_local_loss(espec, t, line, ends, eq, 10.0); }, etheta);
    s.record(rel(g, fd));
  }
  return s.finish();
}

OracleSuiteResult sketch_suite(bool kick) {
  Suite s("sketch_vs_dense_eigenvalues", 0.05, kick);
  const int p = 60, r = 5;
  for (int trial = 0; trial < 10; ++trial) {
    Vector eigs(p);
    for (int i = 0; i < p; ++i) eigs(i) = i < r ? 10.0 * std::pow(0.8, i) : 0.5 * std::pow(0.9, i - r);
    const Matrix q = linalg::qr_thin(gaussian(p, p, 70 + trial)).q;
    const MatrixFisher op(q * eigs.asDiagonal() * q.transpose());
    SketchConfig cfg;
    cfg.rank = r;
    cfg.oversampling = 5;
    cfg.passes = 4;
    cfg.seed = static_cast<std::uint64_t>(trial);
    cfg.energy_threshold = 1.0;
    const FisherSketch sk = sketch_fim(op, cfg);
    if (sk.rank() != r) {
      s.record(1.0);
      continue;
    }
    const Vector got = s.computed(sk.eigenvalues);
    s.record(((got - eigs.head(r)).array().abs() / eigs.head(r).array()).maxCoeff());
  }

  // Network Fisher, at every rank where the gap condition lambda_r >= 2 lambda_{r+1} holds.
  const MlpSpec spec = MlpSpec::uniform({1, 8, 8, 1}, Activation::tanh);
  const ParamVector theta = init_params(spec, 13);
  Dataset data;
  data.inputs = gaussian(1, 60, 14);
  data.targets = gaussian(1, 60, 15);
  const SampleFisher op(spec, theta, data, LossKind::mse);
  const Vector dense = linalg::sym_eig(op.dense()).values;
  for (int rank = 1; rank <= 10; ++rank) {
    if (dense(rank - 1) < 2.0 * dense(rank)) continue;
    SketchConfig cfg;
    cfg.rank = rank;
    cfg.seed = 5;
    cfg.energy_threshold = 1.0;
    const FisherSketch sk = sketch_fim(op, cfg);
    if (sk.rank() != rank) {
      s.record(1.0);
      continue;
    }
    const Vector got = s.computed(sk.eigenvalues);
    s.record(((got - dense.head(rank)).array().abs() / dense.head(rank).array()).maxCoeff());
  }
  return s.finish();
}

OracleSuiteResult gn_consistency_suite(bool kick) {
  Suite s("gn_consistency", 1e-8, kick);
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index p = trial == 0 ? 6 : 4 + static_cast<Eigen::Index>(rng() % 9);
    const int m_count = trial == 0 ? 2 : 2 + static_cast<int>(rng() % 3);
    const ParamVector theta(gaussian_vector(p, 21 + trial));
    std::vector<ClientUpdate> ups;
    double total = 0.0;
    for (int m = 0; m < m_count; ++m) total += 40.0 + 20.0 * m;
    Vector g = Vector::Zero(p);
    Matrix h = Matrix::Zero(p, p);
    for (int m = 0; m < m_count; ++m) {
      const int r = std::max<int>(1, static_cast<int>(p) - 2);
      FisherSketch sk = random_sketch(p, r, 300 + 10 * trial + m);
      const Matrix hm = sk.dense();
      const Vector gm = hm * gaussian_vector(p, 400 + 10 * trial + m);  // in range(H_m)
      const double w = (40.0 + 20.0 * m) / total;
      g += w * gm;
      h += w * hm;
      ClientUpdate u;
      u.client_id = m;
      u.n_samples = static_cast<Eigen::Index>(40 + 20 * m);
      u.delta = -linalg::pinv_sym(hm) * gm;  // exact local GN solve
      u.sketch = std::move(sk);
      ups.push_back(std::move(u));
    }
    const ServerConfig cfg{AggregationRule::fipa_dense, 0.0, 1.0};
    const Vector got = s.computed(fipa_aggregate_dense(theta, ups, cfg).values() - theta.values());
    const Vector want = -linalg::pinv_sym(h) * g;
    s.record(rel(got, want));
  }
  return s.finish();
}

using SuiteFn = OracleSuiteResult (*)(bool);

const std::vector<std::pair<std::string, SuiteFn>>& registry() {
  static const std::vector<std::pair<std::string, SuiteFn>> suites{
      {"fvp_vs_dense", fvp_suite},
      {"qr_vs_dense_aggregation", qr_suite},
      {"finite_difference_gradients", gradient_suite},
      {"sketch_vs_dense_eigenvalues", sketch_suite},
      {"gn_consistency", gn_consistency_suite}};
  return suites;
}

}  // namespace

std::vector<std::string> oracle_suite_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : registry()) names.push_back(name);
  return names;
}

std::vector<OracleSuiteResult> run_oracle_suites(const std::string& perturb) {
  if (!perturb.empty()) {
    const auto names = oracle_suite_names();
    if (std::find(names.begin(), names.end(), perturb) == names.end()) {
      throw std::invalid_argument("unknown oracle suite '" + perturb + "'");
    }
  }
  std::vector<OracleSuiteResult> out;
  for (const auto& [name, fn] : registry()) out.push_back(fn(name == perturb));
  return out;
}

}  // namespace fipa
