#include "fipa/curvature.hpp"

#include <algorithm>
#include <random>
#include <string>

#include "fipa/linalg.hpp"

namespace fipa {

namespace {

void check_cap(Eigen::Index dim, Eigen::Index cap) {
  if (dim > cap) {
    throw CurvatureError("dense curvature requested for p = " + std::to_string(dim) + " above the cap of " +
                         std::to_string(cap));
  }
}

// Top pairs of a small symmetric eigenproblem after the eigenvalue floor and
// the optional energy truncation.
FisherSketch truncate(const Matrix& basis, const linalg::EigenDecomposition& eig, int rank,
                      double energy_threshold) {
  const Eigen::Index avail = eig.values.size();
  const double lmax = avail > 0 ? std::max(eig.values(0), 0.0) : 0.0;
  int keep = 0;
  while (keep < rank && keep < avail && eig.values(keep) > 1e-12 * lmax && lmax > 0.0) ++keep;
  if (keep > 0 && energy_threshold < 1.0) {
    Vector positive = eig.values.cwiseMax(0.0);
    keep = std::min(keep, adaptive_rank(positive, energy_threshold).rank);
  }
  FisherSketch s;
  s.eigenvalues = eig.values.head(keep);
  s.basis = basis * eig.vectors.leftCols(keep);
  return s;
}

}  // namespace

SampleFisher::SampleFisher(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind)
    : kind_(kind), outputs_(spec.output_dim()), samples_(data.size()) {
  if (data.size() == 0) throw CurvatureError("Fisher operator needs a non-empty dataset");
  jacobian_ = theta.gather_columns(batch_jacobian(spec, theta.values(), data.inputs));
  if (kind_ == LossKind::softmax_ce) {
    const Matrix logits = forward_batch(spec, theta.values(), data.inputs);
    output_hess_.reserve(static_cast<std::size_t>(samples_));
    for (Eigen::Index i = 0; i < samples_; ++i) output_hess_.push_back(output_hessian(kind_, logits.col(i)).matrix);
  }
}

void SampleFisher::apply_output_hessians(Matrix& t) const {
  if (kind_ == LossKind::mse) return;
  for (Eigen::Index i = 0; i < samples_; ++i) {
    auto block = t.middleRows(i * outputs_, outputs_);
    block = output_hess_[static_cast<std::size_t>(i)] * block;
  }
}

Matrix SampleFisher::apply(const Matrix& v) const {
  if (v.rows() != dim()) throw CurvatureError("Fisher product: vector length mismatch");
  Matrix t = jacobian_ * v;
  apply_output_hessians(t);
  return jacobian_.transpose() * t / static_cast<double>(samples_);
}

Matrix SampleFisher::project(const Matrix& v) const {
  if (v.rows() != dim()) throw CurvatureError("Fisher projection: vector length mismatch");
  const Matrix jv = jacobian_ * v;
  Matrix sjv = jv;
  apply_output_hessians(sjv);
  return jv.transpose() * sjv / static_cast<double>(samples_);
}

Matrix SampleFisher::dense(Eigen::Index cap) const {
  check_cap(dim(), cap);
  Matrix h = Matrix::Zero(dim(), dim());
  for (Eigen::Index i = 0; i < samples_; ++i) {
    const auto ji = jacobian_.middleRows(i * outputs_, outputs_);
    if (kind_ == LossKind::mse) {
      h.noalias() += ji.transpose() * ji;
    } else {
      h.noalias() += ji.transpose() * output_hess_[static_cast<std::size_t>(i)] * ji;
    }
  }
  h /= static_cast<double>(samples_);
  return 0.5 * (h + h.transpose());
}

PdeFisher::PdeFisher(const MlpSpec& spec, const ParamVector& theta, const Matrix& interior,
                     const Matrix& boundary, const EllipticEquation& eq, double beta_bc)
    : beta_(beta_bc) {
  if (interior.cols() == 0 || boundary.cols() == 0) {
    throw CurvatureError("PDE Fisher needs interior and boundary points");
  }
  if (!(beta_bc > 0.0)) throw CurvatureError("PDE Fisher needs a positive boundary penalty");
  // Quadrature weights of the two mean-square terms are folded into the rows.
  interior_jac_ = theta.gather_columns(interior_residuals(spec, theta.values(), eq, interior, true).jacobian);
  interior_jac_ /= std::sqrt(static_cast<double>(interior.cols()));
  boundary_jac_ = theta.gather_columns(boundary_residuals(spec, theta.values(), eq, boundary, true).jacobian);
  boundary_jac_ /= std::sqrt(static_cast<double>(boundary.cols()));
}

Matrix PdeFisher::apply_interior(const Matrix& v) const { return interior_jac_.transpose() * (interior_jac_ * v); }

Matrix PdeFisher::apply_boundary(const Matrix& v) const {
  return beta_ * (boundary_jac_.transpose() * (boundary_jac_ * v));
}

Matrix PdeFisher::apply(const Matrix& v) const {
  if (v.rows() != dim()) throw CurvatureError("Fisher product: vector length mismatch");
  return apply_interior(v) + apply_boundary(v);
}

Matrix PdeFisher::project(const Matrix& v) const {
  if (v.rows() != dim()) throw CurvatureError("Fisher projection: vector length mismatch");
  const Matrix a = interior_jac_ * v;
  const Matrix b = boundary_jac_ * v;
  return a.transpose() * a + beta_ * (b.transpose() * b);
}

Matrix PdeFisher::dense(Eigen::Index cap) const {
  check_cap(dim(), cap);
  Matrix h = Matrix::Zero(dim(), dim());
  for (Eigen::Index i = 0; i < interior_jac_.rows(); ++i) {
    h.noalias() += interior_jac_.row(i).transpose() * interior_jac_.row(i);
  }
  for (Eigen::Index i = 0; i < boundary_jac_.rows(); ++i) {
    h.noalias() += beta_ * boundary_jac_.row(i).transpose() * boundary_jac_.row(i);
  }
  return h;
}

MatrixFisher::MatrixFisher(Matrix h) : h_(std::move(h)) {
  if (h_.rows() != h_.cols()) throw CurvatureError("MatrixFisher needs a square matrix");
}

Matrix MatrixFisher::dense(Eigen::Index cap) const {
  check_cap(dim(), cap);
  return h_;
}

Vector fim_vector_product(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind,
                          const Vector& v) {
  return SampleFisher(spec, theta, data, kind).apply(v);
}

Matrix dense_fim(const MlpSpec& spec, const ParamVector& theta, const Dataset& data, LossKind kind,
                 Eigen::Index cap) {
  check_cap(theta.trainable_count(), cap);
  return SampleFisher(spec, theta, data, kind).dense(cap);
}

Vector pde_fim_vector_product(const MlpSpec& spec, const ParamVector& theta, const Matrix& interior,
                              const Matrix& boundary, const EllipticEquation& eq, double beta_bc,
                              const Vector& v) {
  return PdeFisher(spec, theta, interior, boundary, eq, beta_bc).apply(v);
}

void SketchConfig::validate(Eigen::Index dim) const {
  if (rank < 1) throw CurvatureError("sketch rank must be >= 1");
  if (oversampling < 0) throw CurvatureError("sketch oversampling must be >= 0");
  if (passes < 1) throw CurvatureError("sketch needs at least one subspace-iteration pass");
  if (rank + oversampling > dim) {
    throw CurvatureError("sketch block size r + s = " + std::to_string(rank + oversampling) +
                         " exceeds the parameter dimension " + std::to_string(dim));
  }
}

FisherSketch sketch_fim(const FisherOperator& op, const SketchConfig& cfg) {
  const Eigen::Index p = op.dim();
  cfg.validate(p);
  const Eigen::Index block = cfg.rank + cfg.oversampling;

  constexpr int kMaxRestarts = 3;
  for (int attempt = 0; attempt <= kMaxRestarts; ++attempt) {
    std::mt19937_64 rng(cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(attempt));
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix v(p, block);
    for (Eigen::Index j = 0; j < block; ++j)
      for (Eigen::Index i = 0; i < p; ++i) v(i, j) = normal(rng);
    v = linalg::qr_thin(v).q;

    bool collapsed = false;
    for (int t = 0; t < cfg.passes; ++t) {
      const Matrix w = op.apply(v);
      if (!w.allFinite() || w.norm() == 0.0) {
        collapsed = true;
        break;
      }
      // A rank-deficient W still yields an orthonormal Q; the extra columns
      // pick up Ritz values near zero and are removed by the floor below.
      v = linalg::qr_thin(w).q;
    }
    if (collapsed) continue;

    Matrix small = op.project(v);
    small = 0.5 * (small + small.transpose());
    const linalg::EigenDecomposition eig = linalg::sym_eig(small);
    return truncate(v, eig, cfg.rank, cfg.energy_threshold);
  }
  throw CurvatureError("sketch_fim: subspace iteration collapsed to zero after " + std::to_string(kMaxRestarts) +
                       " restarts");
}

FisherSketch exact_sketch(const FisherOperator& op, int rank, double energy_threshold) {
  if (rank < 1) throw CurvatureError("sketch rank must be >= 1");
  const Matrix h = op.dense();
  const linalg::EigenDecomposition eig = linalg::sym_eig(0.5 * (h + h.transpose()));
  return truncate(Matrix::Identity(h.rows(), h.rows()), eig, rank, energy_threshold);
}

FisherSketch full_fisher(const FisherOperator& op) {
  const Matrix h = op.dense();
  const linalg::EigenDecomposition eig = linalg::sym_eig(0.5 * (h + h.transpose()));
  FisherSketch out;
  out.basis = eig.vectors;
  out.eigenvalues = eig.values.cwiseMax(0.0);
  return out;
}

AdaptiveRank adaptive_rank(const Vector& eigenvalues, double energy_threshold) {
  if (!(energy_threshold > 0.0 && energy_threshold < 1.0)) {
    throw std::invalid_argument("energy threshold must lie in (0, 1)");
  }
  const double total = eigenvalues.sum();
  if (!(total > 0.0)) return {0, true};
  double acc = 0.0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    acc += eigenvalues(i);
    if (acc >= energy_threshold * total) return {static_cast<int>(i + 1), false};
  }
  return {static_cast<int>(eigenvalues.size()), false};
}

}  // namespace fipa
