#include "fipa/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fipa::linalg {

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

QrResult qr_thin(const Matrix& v) {
  const Eigen::Index p = v.rows();
  const Eigen::Index n = v.cols();
  if (p < n) {
    throw LinalgError("qr_thin: need rows >= cols, got " + std::to_string(p) +
                      "x" + std::to_string(n));
  }
  if (!v.allFinite()) throw LinalgError("qr_thin: non-finite input");

  Matrix a = v;
  // Reflector j is stored in reflectors.col(j) starting at row j.
  Matrix reflectors = Matrix::Zero(p, n);
  Vector tau = Vector::Zero(n);

  for (Eigen::Index j = 0; j < n; ++j) {
    auto x = a.col(j).tail(p - j);
    const double norm_x = x.norm();
    if (norm_x == 0.0) continue;
    const double alpha = x(0) >= 0.0 ? -norm_x : norm_x;
    Vector w = x;
    w(0) -= alpha;
    const double wnorm2 = w.squaredNorm();
    if (wnorm2 == 0.0) continue;
    tau(j) = 2.0 / wnorm2;
    reflectors.col(j).tail(p - j) = w;
    auto block = a.bottomRightCorner(p - j, n - j);
    const Eigen::RowVectorXd proj = w.transpose() * block;
    block.noalias() -= tau(j) * w * proj;
  }

  QrResult out;
  out.r = a.topRows(n).triangularView<Eigen::Upper>();
  out.q = Matrix::Identity(p, n);
  for (Eigen::Index j = n - 1; j >= 0; --j) {
    if (tau(j) == 0.0) continue;
    const auto w = reflectors.col(j).tail(p - j);
    auto block = out.q.bottomRows(p - j);
    const Eigen::RowVectorXd proj = w.transpose() * block;
    block.noalias() -= tau(j) * w * proj;
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    if (out.r(i, i) < 0.0) {
      out.r.row(i) *= -1.0;
      out.q.col(i) *= -1.0;
    }
  }

  double dmax = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) dmax = std::max(dmax, std::abs(out.r(i, i)));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(out.r(i, i)) <= 1e-12 * dmax || dmax == 0.0) {
      out.rank_deficient = true;
      break;
    }
  }
  return out;
}

EigenDecomposition sym_eig(const Matrix& a) {
  if (a.rows() != a.cols()) throw LinalgError("sym_eig: matrix is not square");
  if (!a.allFinite()) throw LinalgError("sym_eig: non-finite input");
  const Eigen::Index n = a.rows();
  EigenDecomposition out;
  if (n == 0) return out;

  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw LinalgError("sym_eig: matrix is not symmetric");
  }

  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success) {
    throw LinalgError("sym_eig: eigensolver did not converge");
  }
  // Eigen returns ascending order.
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  return out;
}

namespace {

// Clamp tiny negative eigenvalues of a PSD matrix to zero.
void clamp_psd(Vector& values) {
  const double lmax = values.size() > 0 ? std::max(values.maxCoeff(), 0.0) : 0.0;
  for (auto& v : values) {
    if (v < 0.0 && v >= -1e-10 * lmax) v = 0.0;
  }
}

}  // namespace

Matrix pinv_sym(const Matrix& a, double rel_cutoff) {
  const EigenDecomposition eig = sym_eig(a);
  const Eigen::Index n = a.rows();
  if (n == 0) return Matrix(0, 0);
  const double amax = eig.values.cwiseAbs().maxCoeff();
  Vector inv = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double l = eig.values(i);
    if (std::abs(l) > rel_cutoff * amax && amax > 0.0) inv(i) = 1.0 / l;
  }
  return eig.vectors * inv.asDiagonal() * eig.vectors.transpose();
}

Vector solve_regularized(const Matrix& a, double beta, const Vector& b) {
  if (a.rows() != a.cols() || a.rows() != b.size()) {
    throw LinalgError("solve_regularized: dimension mismatch");
  }
  if (beta < 0.0) throw LinalgError("solve_regularized: beta must be >= 0");
  if (!b.allFinite()) throw LinalgError("solve_regularized: non-finite rhs");
  const Eigen::Index n = a.rows();
  if (n == 0) return Vector(0);

  EigenDecomposition eig = sym_eig(a);
  clamp_psd(eig.values);
  const Vector coeffs = eig.vectors.transpose() * b;

  Vector scaled = Vector::Zero(n);
  if (beta > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i) scaled(i) = coeffs(i) / (eig.values(i) + beta);
    return eig.vectors * scaled;
  }

  const double amax = eig.values.cwiseAbs().maxCoeff();
  double off_range2 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double l = eig.values(i);
    if (amax > 0.0 && std::abs(l) > 1e-10 * amax) {
      scaled(i) = coeffs(i) / l;
    } else {
      off_range2 += coeffs(i) * coeffs(i);
    }
  }
  if (std::sqrt(off_range2) > 1e-8 * b.norm()) {
    throw LinalgError("solve_regularized: inconsistent system, rhs has a component outside range(A)");
  }
  return eig.vectors * scaled;
}

double condition_estimate(const Matrix& a) {
  const EigenDecomposition eig = sym_eig(a);
  if (eig.values.size() == 0) return 1.0;
  const double hi = eig.values.cwiseAbs().maxCoeff();
  const double lo = eig.values.cwiseAbs().minCoeff();
  if (lo == 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace fipa::linalg
