#include "fipa/elliptic.hpp"

#include <stdexcept>

namespace fipa {

namespace {

void require_points(const Matrix& interior, const Matrix& boundary) {
  if (interior.cols() == 0) throw std::invalid_argument("PDE loss: no interior points");
  if (boundary.cols() == 0) throw std::invalid_argument("PDE loss: no boundary points");
}

Dataset boundary_dataset(const EllipticEquation& eq, const Matrix& points) {
  Dataset d;
  d.inputs = points;
  d.targets.resize(1, points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) d.targets(0, i) = eq.boundary_value(points.col(i));
  return d;
}

}  // namespace

ResidualBlock interior_residuals(const MlpSpec& spec, const Vector& theta, const EllipticEquation& eq,
                                 const Matrix& points, bool with_jacobian) {
  const Eigen::Index n = points.cols();
  ResidualBlock out;
  out.residual.resize(n);
  if (with_jacobian) out.jacobian.resize(n, spec.param_count());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector x = points.col(i);
    const LaplacianTape tape(spec, theta, x);
    out.residual(i) = eq.interior_residual(tape.value(), tape.laplacian(), x);
    if (with_jacobian) {
      out.jacobian.row(i) = tape.pullback(eq.reaction_slope(tape.value()), -1.0).transpose();
    }
  }
  return out;
}

ResidualBlock boundary_residuals(const MlpSpec& spec, const Vector& theta, const EllipticEquation& eq,
                                 const Matrix& points, bool with_jacobian) {
  ResidualBlock out;
  const Matrix u = forward_batch(spec, theta, points);
  out.residual.resize(points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    out.residual(i) = u(0, i) - eq.boundary_value(points.col(i));
  }
  if (with_jacobian) out.jacobian = batch_jacobian(spec, theta, points);
  return out;
}

double pde_local_loss(const MlpSpec& spec, const Vector& theta, const Matrix& interior,
                      const Matrix& boundary, const EllipticEquation& eq, double beta_bc) {
  require_points(interior, boundary);
  if (!(beta_bc > 0.0)) throw std::invalid_argument("PDE loss: boundary penalty must be > 0");
  const ResidualBlock in = interior_residuals(spec, theta, eq, interior, false);
  const ResidualBlock bc = boundary_residuals(spec, theta, eq, boundary, false);
  return 0.5 * in.residual.squaredNorm() / static_cast<double>(interior.cols()) +
         0.5 * beta_bc * bc.residual.squaredNorm() / static_cast<double>(boundary.cols());
}

LossGradient pde_loss_and_gradient(const MlpSpec& spec, const Vector& theta, const Matrix& interior,
                                   const Matrix& boundary, const EllipticEquation& eq, double beta_bc) {
  require_points(interior, boundary);
  if (!(beta_bc > 0.0)) throw std::invalid_argument("PDE loss: boundary penalty must be > 0");
  const auto n_int = static_cast<double>(interior.cols());
  LossGradient out;
  out.grad = Vector::Zero(spec.param_count());
  double interior_sq = 0.0;
  for (Eigen::Index i = 0; i < interior.cols(); ++i) {
    const Vector x = interior.col(i);
    const LaplacianTape tape(spec, theta, x);
    const double r = eq.interior_residual(tape.value(), tape.laplacian(), x);
    interior_sq += r * r;
    out.grad += tape.pullback(r * eq.reaction_slope(tape.value()) / n_int, -r / n_int);
  }
  const LossGradient bc = loss_and_gradient(spec, theta, boundary_dataset(eq, boundary), LossKind::mse);
  out.loss = 0.5 * interior_sq / n_int + beta_bc * bc.loss;
  out.grad += beta_bc * bc.grad;
  return out;
}

}  // namespace fipa
