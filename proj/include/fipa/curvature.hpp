#pragma once

#include <cstdint>
#include <memory>

#include "fipa/elliptic.hpp"
#include "fipa/mlp.hpp"

namespace fipa {

inline constexpr Eigen::Index kDefaultDenseCap = 2000;

class CurvatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Client Fisher/GGN curvature H restricted to the trainable coordinates.
// Products are accumulated sample by sample; no p x p matrix is formed except
// by dense().
class FisherOperator {
 public:
  virtual ~FisherOperator() = default;

  virtual Eigen::Index dim() const = 0;
  // H V for a block of column vectors.
  virtual Matrix apply(const Matrix& v) const = 0;
  // V^T H V, enumerating the samples directly.
  virtual Matrix project(const Matrix& v) const = 0;
  // Explicit H, assembled as a sum of per-sample terms. Throws past the cap.
  virtual Matrix dense(Eigen::Index cap = kDefaultDenseCap) const = 0;

  Vector apply(const Vector& v) const { return apply(Matrix(v)).col(0); }
};

// H = (1/N) sum_i J_i^T S_i J_i over a labelled or regression dataset.
class SampleFisher final : public FisherOperator {
 public:
  SampleFisher(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind);

  Eigen::Index dim() const override { return jacobian_.cols(); }
  Matrix apply(const Matrix& v) const override;
  Matrix project(const Matrix& v) const override;
  Matrix dense(Eigen::Index cap = kDefaultDenseCap) const override;

 private:
  // Applies S_i to each C-row block of t in place.
  void apply_output_hessians(Matrix& t) const;

  LossKind kind_;
  int outputs_;
  Eigen::Index samples_;
  Matrix jacobian_;                  // (N*C) x p_eff
  std::vector<Matrix> output_hess_;  // per-sample S_i, empty for MSE
};

// H = (1/N_int) J_int^T J_int + (beta / N_bc) J_bc^T J_bc, the Gauss-Newton
// matrix of pde_local_loss.
class PdeFisher final : public FisherOperator {
 public:
  PdeFisher(const MlpSpec& spec, const ParamVector& theta, const Matrix& interior, const Matrix& boundary,
            const EllipticEquation& eq, double beta_bc);

  Eigen::Index dim() const override { return interior_jac_.cols(); }
  Matrix apply(const Matrix& v) const override;
  Matrix project(const Matrix& v) const override;
  Matrix dense(Eigen::Index cap = kDefaultDenseCap) const override;

  // The two halves separately, for checking the decomposition.
  Matrix apply_interior(const Matrix& v) const;
  Matrix apply_boundary(const Matrix& v) const;

 private:
  double beta_;
  Matrix interior_jac_;  // N_int x p_eff, rows d r_int / d theta
  Matrix boundary_jac_;  // N_bc x p_eff, rows d r_bc / d theta
};

// Wraps an explicit symmetric PSD matrix.
class MatrixFisher final : public FisherOperator {
 public:
  explicit MatrixFisher(Matrix h);
  Eigen::Index dim() const override { return h_.rows(); }
  Matrix apply(const Matrix& v) const override { return h_ * v; }
  Matrix project(const Matrix& v) const override { return v.transpose() * h_ * v; }
  Matrix dense(Eigen::Index cap = kDefaultDenseCap) const override;

 private:
  Matrix h_;
};

Vector fim_vector_product(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind,
                          const Vector& v);
Matrix dense_fim(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind,
                 Eigen::Index cap = kDefaultDenseCap);
Vector pde_fim_vector_product(const MlpSpec& spec, const ParamVector& theta, const Matrix& interior,
                              const Matrix& boundary, const EllipticEquation& eq, double beta_bc,
                              const Vector& v);

struct SketchConfig {
  int rank = 8;
  int oversampling = 5;
  int passes = 4;
  std::uint64_t seed = 0;
  // Keep the smallest rank holding this share of the Ritz-value mass; values
  // >= 1 disable the truncation.
  double energy_threshold = 0.99;

  void validate(Eigen::Index dim) const;
};

// Rank-r eigenpair sketch H ~ U diag(lambda) U^T.
struct FisherSketch {
  Matrix basis;        // p_eff x r, orthonormal columns
  Vector eigenvalues;  // r, non-increasing, >= 0
  double weight = 0.0; // N_m / N, filled in at aggregation time

  int rank() const { return static_cast<int>(eigenvalues.size()); }
  Matrix dense() const { return basis * eigenvalues.asDiagonal() * basis.transpose(); }
};

// Subspace iteration with a Rayleigh-Ritz projection.
FisherSketch sketch_fim(const FisherOperator& op, const SketchConfig& cfg);

// Top-r eigenpairs of the dense matrix (exact path, small p).
FisherSketch exact_sketch(const FisherOperator& op, int rank, double energy_threshold = 1.0);

// Every eigenpair of the dense matrix with negative round-off clipped to 0,
// no floor: basis diag(values) basis^T reproduces H.
FisherSketch full_fisher(const FisherOperator& op);

struct AdaptiveRank {
  int rank = 0;
  bool fallback = false;  // all-zero spectrum
};

// Smallest r with sum_{i<=r} lambda_i >= threshold * sum lambda_i, at least 1.
AdaptiveRank adaptive_rank(const Vector& eigenvalues, double energy_threshold);

}  // namespace fipa
