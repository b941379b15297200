#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fipa/elliptic.hpp"
#include "fipa/problems.hpp"
#include "test_util.hpp"

using namespace fipa;

namespace {

constexpr double kPi = std::numbers::pi;

Vector point(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

// -u'' = 0 with u = 2x + 1 on [0,1]; representable by an affine network.
EllipticEquation affine_equation() {
  EllipticEquation eq;
  eq.name = "affine";
  eq.dim = 1;
  eq.reaction = [](double) { return 0.0; };
  eq.reaction_slope = [](double) { return 0.0; };
  eq.source = [](const Vector&) { return 0.0; };
  eq.boundary_value = [](const Vector& x) { return 2.0 * x(0) + 1.0; };
  eq.exact = eq.boundary_value;
  eq.exact_laplacian = [](const Vector&) { return 0.0; };
  return eq;
}

std::vector<EllipticEquation> all_equations() {
  std::vector<EllipticEquation> eqs{poisson_equation(1), poisson_equation(2), poisson_equation(3)};
  for (auto kind : {EllipticKind::allen_cahn, EllipticKind::bratu, EllipticKind::fisher,
                    EllipticKind::reaction_diffusion}) {
    eqs.push_back(nonlinear_elliptic_equation(kind));
  }
  return eqs;
}

}  // namespace

TEST_CASE("sine target") {
  const auto p = sine_target(2);
  CHECK(p->target(point({0.25})) == doctest::Approx(1.0).epsilon(1e-15));
  for (int n : {1, 2, 4, 8}) {
    const auto q = sine_target(n);
    CHECK(std::abs(q->target(point({0.0}))) <= 1e-14);
    CHECK(std::abs(q->target(point({1.0}))) <= 1e-14);
  }
  CHECK(p->test_inputs().cols() == 1000);
  Vector t(p->test_inputs().cols());
  for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = p->target(p->test_inputs().col(i));
  CHECK(mse_metric(t, t) == 0.0);
  CHECK_THROWS_AS(sine_target(0), std::invalid_argument);
}

TEST_CASE("Gaussian mixture target") {
  GaussianMixtureSpec spec;
  spec.components.push_back({1.0, point({0.4, 0.6}), 0.1});
  CHECK(spec(point({0.4, 0.6})) == doctest::Approx(1.0));
  CHECK(spec(point({0.4 + 0.3, 0.6})) == doctest::Approx(std::exp(-4.5)).epsilon(1e-12));
  CHECK(spec(point({0.4 + 0.3, 0.6})) == doctest::Approx(0.0111).epsilon(0.01));

  const GaussianMixtureSpec random = random_gaussian_mixture(7);
  REQUIRE(random.components.size() == 6);
  for (const auto& c : random.components) {
    CHECK(c.weight >= 0.5);
    CHECK(c.weight <= 1.5);
    CHECK(c.sigma >= 0.08);
    CHECK(c.sigma <= 0.2);
    CHECK(c.center.minCoeff() >= 0.15);
    CHECK(c.center.maxCoeff() <= 0.85);
  }
  const auto p = gaussian_mixture_target(random);
  CHECK(p->test_inputs().cols() == 64 * 64);
  for (Eigen::Index i = 0; i < p->test_inputs().cols(); i += 37) CHECK(p->target(p->test_inputs().col(i)) >= 0.0);

  GaussianMixtureSpec bad;
  bad.components.push_back({1.0, point({0.5, 0.5}), 0.0});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("Poisson problem") {
  const EllipticEquation eq = poisson_equation(1);
  CHECK(eq.source(point({0.5})) == doctest::Approx(kPi * kPi).epsilon(1e-15));
  const EllipticEquation eq2 = poisson_equation(2);
  for (double t : {0.0, 0.3, 0.77, 1.0}) {
    CHECK(std::abs(eq2.exact(point({0.0, t}))) <= 1e-15);
    CHECK(std::abs(eq2.exact(point({1.0, t}))) <= 1e-15);
    CHECK(std::abs(eq2.exact(point({t, 0.0}))) <= 1e-15);
    CHECK(std::abs(eq2.exact(point({t, 1.0}))) <= 1e-15);
  }
  CHECK_THROWS_AS(poisson_equation(0), std::invalid_argument);
}

TEST_CASE("manufactured solutions have zero residual") {
  for (const EllipticEquation& eq : all_equations()) {
    std::mt19937_64 rng(5);
    const Box box = Box::unit(eq.dim);
    for (int i = 0; i < 100; ++i) {
      Vector x = box.sample(rng);
      CHECK(std::abs(eq.interior_residual(eq.exact(x), eq.exact_laplacian(x), x)) <= 1e-10);
      x(i % eq.dim) = i % 2 == 0 ? 0.0 : 1.0;
      CHECK(std::abs(eq.exact(x) - eq.boundary_value(x)) <= 1e-10);
    }
  }
}

TEST_CASE("nonlinear reaction terms") {
  // Independent restatement of the reaction table at default coefficients.
  const std::vector<std::pair<EllipticKind, std::function<double(double)>>> table{
      {EllipticKind::allen_cahn, [](double u) { return u * u * u - u; }},
      {EllipticKind::bratu, [](double u) { return -std::exp(u); }},
      {EllipticKind::fisher, [](double u) { return -u + u * u; }},
      {EllipticKind::reaction_diffusion, [](double u) { return u * u; }},
  };
  for (const auto& [kind, g] : table) {
    const EllipticEquation eq = nonlinear_elliptic_equation(kind);
    for (int i = 0; i < 10; ++i) {
      const double u = -1.5 + 0.3 * i;
      CHECK(eq.reaction(u) == doctest::Approx(g(u)).epsilon(1e-14));
      const double h = 1e-6;
      CHECK(eq.reaction_slope(u) == doctest::Approx((g(u + h) - g(u - h)) / (2 * h)).epsilon(1e-7));
    }
    CHECK(eq.exact(point({0.5})) == doctest::Approx(1.0));
    CHECK(parse_elliptic_kind(to_string(kind)) == kind);
  }
  const EllipticEquation ac = nonlinear_elliptic_equation(EllipticKind::allen_cahn);
  CHECK(ac.reaction(0.0) == 0.0);
  // At a root of u*, f reduces to -u*''.
  CHECK(ac.source(point({0.0})) == doctest::Approx(-ac.exact_laplacian(point({0.0}))));
  const EllipticEquation sharp = nonlinear_elliptic_equation(EllipticKind::allen_cahn, {0.5});
  CHECK(sharp.reaction(2.0) == doctest::Approx(24.0));
  CHECK_THROWS_AS(parse_elliptic_kind("burgers"), std::invalid_argument);
  CHECK_THROWS_AS(nonlinear_elliptic_equation(EllipticKind::allen_cahn, {0.0}), std::invalid_argument);
}

TEST_CASE("PDE loss on an exactly representable solution") {
  const MlpSpec spec = MlpSpec::uniform({1, 1}, Activation::identity);
  const EllipticEquation eq = affine_equation();
  Matrix interior(1, 4);
  interior << 0.1, 0.4, 0.6, 0.9;
  Matrix boundary(1, 2);
  boundary << 0.0, 1.0;
  const Vector exact = point({2.0, 1.0});
  CHECK(std::abs(pde_local_loss(spec, exact, interior, boundary, eq, 100.0)) <= 1e-12);

  // Shifted bias: interior residual still zero, boundary residual 0.5.
  const Vector shifted = point({2.0, 1.5});
  const double l1 = pde_local_loss(spec, shifted, interior, boundary, eq, 3.0);
  const double l2 = pde_local_loss(spec, shifted, interior, boundary, eq, 6.0);
  CHECK(l1 == doctest::Approx(0.5 * 3.0 * 0.25));
  CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-15));
}

TEST_CASE("PDE loss matches a recomputation from raw residuals") {
  const MlpSpec spec = MlpSpec::uniform({1, 8, 8, 1}, Activation::tanh);
  const Vector theta = init_params(spec, 3).values();
  for (const EllipticEquation& eq : all_equations()) {
    if (eq.dim != 1) continue;
    Matrix interior(1, 9);
    for (int i = 0; i < 9; ++i) interior(0, i) = 0.05 + 0.1 * i;
    Matrix boundary(1, 2);
    boundary << 0.0, 1.0;
    double sq_int = 0.0, sq_bc = 0.0;
    for (int i = 0; i < 9; ++i) {
      const ValueLaplacian vl = input_laplacian(spec, theta, interior.col(i));
      const double r = -vl.laplacian + eq.reaction(vl.value) - eq.source(interior.col(i));
      sq_int += r * r;
    }
    for (int i = 0; i < 2; ++i) {
      const double r = forward(spec, theta, boundary.col(i))(0) - eq.boundary_value(boundary.col(i));
      sq_bc += r * r;
    }
    const double expected = 0.5 * sq_int / 9.0 + 0.5 * 100.0 * sq_bc / 2.0;
    CHECK(pde_local_loss(spec, theta, interior, boundary, eq, 100.0) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("PDE gradient matches finite differences") {
  const MlpSpec spec = MlpSpec::uniform({2, 5, 4, 1}, Activation::tanh);
  const Vector theta = init_params(spec, 9).values();
  for (const EllipticEquation& eq : {poisson_equation(2)}) {
    Matrix interior = fipa::testing::random_matrix(2, 6, 3).cwiseAbs().cwiseMin(1.0);
    Matrix boundary(2, 3);
    boundary << 0.0, 0.4, 1.0, 0.3, 1.0, 0.8;
    const LossGradient lg = pde_loss_and_gradient(spec, theta, interior, boundary, eq, 50.0);
    CHECK(lg.loss == doctest::Approx(pde_local_loss(spec, theta, interior, boundary, eq, 50.0)).epsilon(1e-13));
    Vector fd(theta.size());
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      Vector up = theta, dn = theta;
      up(k) += 1e-5;
      dn(k) -= 1e-5;
      fd(k) = (pde_local_loss(spec, up, interior, boundary, eq, 50.0) -
               pde_local_loss(spec, dn, interior, boundary, eq, 50.0)) /
              2e-5;
    }
    CHECK(fipa::testing::rel_diff(lg.grad, fd) <= 1e-5);
  }
  const MlpSpec spec1 = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  const Vector theta1 = init_params(spec1, 2).values();
  for (auto kind : {EllipticKind::allen_cahn, EllipticKind::bratu}) {
    const EllipticEquation eq = nonlinear_elliptic_equation(kind);
    Matrix interior(1, 5);
    interior << 0.1, 0.3, 0.5, 0.7, 0.9;
    Matrix boundary(1, 2);
    boundary << 0.0, 1.0;
    const LossGradient lg = pde_loss_and_gradient(spec1, theta1, interior, boundary, eq, 10.0);
    Vector fd(theta1.size());
    for (Eigen::Index k = 0; k < theta1.size(); ++k) {
      Vector up = theta1, dn = theta1;
      up(k) += 1e-5;
      dn(k) -= 1e-5;
      fd(k) = (pde_local_loss(spec1, up, interior, boundary, eq, 10.0) -
               pde_local_loss(spec1, dn, interior, boundary, eq, 10.0)) /
              2e-5;
    }
    CHECK(fipa::testing::rel_diff(lg.grad, fd) <= 1e-5);
  }
}

TEST_CASE("PDE loss errors") {
  const MlpSpec spec = MlpSpec::uniform({1, 3, 1}, Activation::tanh);
  const Vector theta = init_params(spec, 1).values();
  const EllipticEquation eq = poisson_equation(1);
  Matrix pts(1, 2);
  pts << 0.0, 1.0;
  CHECK_THROWS_AS(pde_local_loss(spec, theta, Matrix(1, 0), pts, eq, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(pde_local_loss(spec, theta, pts, Matrix(1, 0), eq, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(pde_local_loss(spec, theta, pts, pts, eq, 0.0), std::invalid_argument);
}

TEST_CASE("evaluation metrics") {
  const MlpSpec spec = MlpSpec::uniform({1, 4, 1}, Activation::tanh);
  const Vector zero = Vector::Zero(spec.param_count());
  const auto poisson = poisson_problem(1);
  CHECK(poisson->eval_metric(spec, zero) == doctest::Approx(1.0).epsilon(1e-14));
  Vector u = Vector::LinSpaced(5, 0.0, 1.0);
  CHECK(relative_l2(u, u) == 0.0);
  const std::vector<int> pred{1, 0, 2}, labels{1, 1, 2};
  CHECK(accuracy(pred, labels) == doctest::Approx(2.0 / 3.0));
  CHECK(mse_metric(point({1.0, 3.0}), point({0.0, 0.0})) == doctest::Approx(5.0));
  CHECK_THROWS_AS(relative_l2(Vector::Zero(3), Vector::Zero(3)), std::invalid_argument);
  CHECK_THROWS_AS(accuracy(pred, std::vector<int>{1}), std::invalid_argument);

  const auto sine = sine_target(2);
  CHECK(sine->eval_metric(spec, zero) == doctest::Approx(0.5).epsilon(1e-3));
  CHECK_FALSE(sine->higher_is_better());
}

TEST_CASE("synthetic blobs") {
  const BlobData blobs = synthetic_classification(4, 25, 3, 5.0, 11);
  CHECK(blobs.data.size() == 100);
  std::vector<int> counts(4, 0);
  for (int l : blobs.data.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) CHECK(c == 25);
  for (int c = 0; c < 4; ++c) CHECK(blobs.centers.col(c).norm() == doctest::Approx(5.0));

  const BlobData flat = synthetic_classification(3, 5, 2, 0.0, 1);
  CHECK(flat.centers.norm() == 0.0);
  CHECK_THROWS_AS(synthetic_classification(1, 5, 2, 1.0, 1), std::invalid_argument);

  const BlobData again = synthetic_classification(4, 25, 3, 5.0, 11);
  CHECK(again.data.inputs == blobs.data.inputs);
}

TEST_CASE("client sampling stays inside the region") {
  const auto sine = sine_target(2);
  std::mt19937_64 rng(3);
  const Box region{point({0.5}), point({1.0})};
  const ClientData c = sine->make_client(1, region, 200, 0, rng);
  CHECK(c.sample_count() == 200);
  for (Eigen::Index i = 0; i < c.sample_count(); ++i) {
    CHECK(region.contains(c.samples.inputs.col(i)));
    CHECK(c.samples.targets(0, i) == sine->target(c.samples.inputs.col(i)));
  }

  const auto poisson = poisson_problem(2);
  const Box cell{point({0.0, 0.0}), point({0.5, 1.0})};
  const ClientData pc = poisson->make_client(0, cell, 50, 8, rng);
  CHECK(pc.sample_count() == 50);
  REQUIRE(pc.boundary.cols() == 8);
  for (Eigen::Index i = 0; i < pc.boundary.cols(); ++i) {
    const Vector x = pc.boundary.col(i);
    CHECK(Box::unit(2).contains(x));
    const bool on_face = x(0) == 0.0 || x(0) == 1.0 || x(1) == 0.0 || x(1) == 1.0;
    CHECK(on_face);
  }
  const ClientData line = poisson_problem(1)->make_client(0, Box{point({0.3}), point({0.6})}, 10, 2, rng);
  CHECK(line.boundary(0, 0) == 0.0);
  CHECK(line.boundary(0, 1) == 1.0);
}

TEST_CASE("stacked residual system reproduces the weighted objective") {
  const MlpSpec spec = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  const Vector theta = init_params(spec, 4).values();
  std::mt19937_64 rng(9);

  const auto sine = sine_target(2);
  std::vector<ClientData> clients{sine->make_client(0, Box{point({0.0}), point({0.5})}, 30, 0, rng),
                                  sine->make_client(1, Box{point({0.5}), point({1.0})}, 70, 0, rng)};
  const ResidualBlock rs = sine->residual_system(spec, theta, clients);
  const double weighted = 0.3 * sine->local_loss(spec, theta, clients[0]) + 0.7 * sine->local_loss(spec, theta, clients[1]);
  CHECK(0.5 * rs.residual.squaredNorm() == doctest::Approx(weighted).epsilon(1e-13));
  const Vector g = 0.3 * sine->local_loss_and_gradient(spec, theta, clients[0]).grad +
                   0.7 * sine->local_loss_and_gradient(spec, theta, clients[1]).grad;
  CHECK(fipa::testing::rel_diff(rs.jacobian.transpose() * rs.residual, g) <= 1e-12);

  const auto poisson = poisson_problem(1);
  std::vector<ClientData> pcs{poisson->make_client(0, Box{point({0.0}), point({0.4})}, 20, 2, rng),
                              poisson->make_client(1, Box{point({0.4}), point({1.0})}, 30, 2, rng)};
  const ResidualBlock pr = poisson->residual_system(spec, theta, pcs);
  const double pw = 0.4 * poisson->local_loss(spec, theta, pcs[0]) + 0.6 * poisson->local_loss(spec, theta, pcs[1]);
  CHECK(0.5 * pr.residual.squaredNorm() == doctest::Approx(pw).epsilon(1e-13));
  const Vector pg = 0.4 * poisson->local_loss_and_gradient(spec, theta, pcs[0]).grad +
                    0.6 * poisson->local_loss_and_gradient(spec, theta, pcs[1]).grad;
  CHECK(fipa::testing::rel_diff(pr.jacobian.transpose() * pr.residual, pg) <= 1e-12);

  // Gauss-Newton matrix of the stacked system = weighted client Fishers.
  const ParamVector pv(theta);
  const Matrix h = 0.4 * poisson->fisher(spec, pv, pcs[0])->dense() + 0.6 * poisson->fisher(spec, pv, pcs[1])->dense();
  CHECK(fipa::testing::rel_diff(pr.jacobian.transpose() * pr.jacobian, h) <= 1e-12);
}

TEST_CASE("unit grids") {
  CHECK(unit_grid(1, 1000).cols() == 1000);
  const Matrix g2 = unit_grid(2, 64);
  CHECK(g2.cols() == 64 * 64);
  CHECK(g2.minCoeff() == 0.0);
  CHECK(g2.maxCoeff() == 1.0);
  CHECK(unit_grid(3, 10).cols() == 100);
  CHECK(unit_grid(3, 10) == unit_grid(3, 10));
}
