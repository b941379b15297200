#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace fipa::linalg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class LinalgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QrResult {
  Matrix q;  // p x n, orthonormal columns
  Matrix r;  // n x n, upper triangular, non-negative diagonal
  // Set when some |R(i,i)| falls below 1e-12 * max|R(j,j)|.
  bool rank_deficient = false;
};

// Eigenpairs of a symmetric matrix, values in non-increasing order and
// vectors stored as orthonormal columns.
struct EigenDecomposition {
  Vector values;
  Matrix vectors;
};

bool all_finite(const Matrix& m);
bool all_finite(const Vector& v);

// Householder thin QR of a tall matrix (rows >= cols).
QrResult qr_thin(const Matrix& v);

// Symmetric eigensolve. Throws when the input is not symmetric within 1e-12
// (relative to its largest entry).
EigenDecomposition sym_eig(const Matrix& a);

// Moore-Penrose pseudoinverse of a symmetric matrix; eigenvalues with
// |lambda| <= rel_cutoff * max|lambda| are treated as zero.
Matrix pinv_sym(const Matrix& a, double rel_cutoff = 1e-10);

// Solves (A + beta I) x = b for symmetric PSD A. With beta == 0 returns the
// minimum-norm solution A^+ b and throws if b has a component outside
// range(A) larger than 1e-8 ||b||.
Vector solve_regularized(const Matrix& a, double beta, const Vector& b);

// Largest |eigenvalue| / smallest |eigenvalue| of a symmetric matrix.
double condition_estimate(const Matrix& a);

}  // namespace fipa::linalg
