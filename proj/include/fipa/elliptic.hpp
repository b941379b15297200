#pragma once

#include <functional>
#include <string>

#include "fipa/mlp.hpp"

namespace fipa {

// -lap(u) + G(u) = f in the domain, u = g_D on the boundary, together with a
// known exact solution for evaluation.
struct EllipticEquation {
  std::string name;
  int dim = 1;
  std::function<double(double)> reaction;        // G(u)
  std::function<double(double)> reaction_slope;  // G'(u)
  std::function<double(const Vector&)> source;   // f(x)
  std::function<double(const Vector&)> boundary_value;
  std::function<double(const Vector&)> exact;
  std::function<double(const Vector&)> exact_laplacian;

  double interior_residual(double u, double lap, const Vector& x) const {
    return -lap + reaction(u) - source(x);
  }
};

// Residuals at a set of points (d x n) and, optionally, their parameter
// Jacobian (n x p).
struct ResidualBlock {
  Vector residual;
  Matrix jacobian;
};

ResidualBlock interior_residuals(const MlpSpec& spec, const Vector& theta, const EllipticEquation& eq,
                                 const Matrix& points, bool with_jacobian);
ResidualBlock boundary_residuals(const MlpSpec& spec, const Vector& theta, const EllipticEquation& eq,
                                 const Matrix& points, bool with_jacobian);

// 0.5 mean(r_int^2) + (beta_bc / 2) mean(r_bc^2)
double pde_local_loss(const MlpSpec& spec, const Vector& theta, const Matrix& interior,
                      const Matrix& boundary, const EllipticEquation& eq, double beta_bc);

LossGradient pde_loss_and_gradient(const MlpSpec& spec, const Vector& theta, const Matrix& interior,
                                   const Matrix& boundary, const EllipticEquation& eq, double beta_bc);

}  // namespace fipa
