#pragma once

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fipa/curvature.hpp"
#include "fipa/elliptic.hpp"
#include "fipa/mlp.hpp"

namespace fipa {

enum class ProblemKind { regression, pde, classification };

// Axis-aligned box [lo, hi].
struct Box {
  Vector lo;
  Vector hi;

  static Box unit(int dim);
  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Vector& x, double tol = 0.0) const;
  Vector sample(std::mt19937_64& rng) const;
};

// One client's private data. For PDE problems `samples.inputs` holds the
// interior collocation points and `boundary` the points on the client's share
// of the Dirichlet boundary.
struct ClientData {
  int id = 0;
  Dataset samples;
  Matrix boundary;
  Box region;

  Eigen::Index sample_count() const { return samples.size(); }
};

class Problem {
 public:
  virtual ~Problem() = default;

  virtual ProblemKind kind() const = 0;
  virtual std::string name() const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual LossKind loss_kind() const = 0;
  virtual Box domain() const { return Box::unit(input_dim()); }

  // Regression: test-grid MSE. PDE: relative L2 error against the exact
  // solution. Classification: top-1 accuracy.
  virtual double eval_metric(const MlpSpec& spec, const Vector& theta) const = 0;
  bool higher_is_better() const { return kind() == ProblemKind::classification; }

  // Local objective F_m and its gradient on a mini-batch of the client's
  // samples (all samples when `batch` is empty).
  virtual LossGradient local_loss_and_gradient(const MlpSpec& spec, const Vector& theta, const ClientData& client,
                                               std::span<const Eigen::Index> batch = {}) const = 0;
  double local_loss(const MlpSpec& spec, const Vector& theta, const ClientData& client) const;

  virtual std::unique_ptr<FisherOperator> fisher(const MlpSpec& spec, const ParamVector& theta,
                                                 const ClientData& client) const = 0;

  // Stacked residual xi and Jacobian J over all clients, scaled so that
  // 0.5 ||xi||^2 = sum_m (N_m / N) F_m. Least-squares problems only.
  virtual ResidualBlock residual_system(const MlpSpec& spec, const Vector& theta,
                                        std::span<const ClientData> clients) const;

  // Draws n samples uniformly from `region` (regression and PDE problems).
  virtual ClientData make_client(int id, const Box& region, Eigen::Index n, Eigen::Index n_boundary,
                                 std::mt19937_64& rng) const;
};

class RegressionProblem : public Problem {
 public:
  using Target = std::function<double(const Vector&)>;

  RegressionProblem(std::string name, Box domain, Target target, Matrix test_inputs);

  ProblemKind kind() const override { return ProblemKind::regression; }
  std::string name() const override { return name_; }
  int input_dim() const override { return domain_.dim(); }
  int output_dim() const override { return 1; }
  LossKind loss_kind() const override { return LossKind::mse; }
  Box domain() const override { return domain_; }

  double target(const Vector& x) const { return target_(x); }
  const Matrix& test_inputs() const { return test_inputs_; }

  double eval_metric(const MlpSpec& spec, const Vector& theta) const override;
  LossGradient local_loss_and_gradient(const MlpSpec& spec, const Vector& theta, const ClientData& client,
                                       std::span<const Eigen::Index> batch = {}) const override;
  std::unique_ptr<FisherOperator> fisher(const MlpSpec& spec, const ParamVector& theta,
                                         const ClientData& client) const override;
  ResidualBlock residual_system(const MlpSpec& spec, const Vector& theta,
                                std::span<const ClientData> clients) const override;
  ClientData make_client(int id, const Box& region, Eigen::Index n, Eigen::Index n_boundary,
                         std::mt19937_64& rng) const override;

 private:
  std::string name_;
  Box domain_;
  Target target_;
  Matrix test_inputs_;
  Vector test_targets_;
};

class PdeProblem : public Problem {
 public:
  PdeProblem(EllipticEquation eq, double beta_bc, Matrix test_inputs);

  ProblemKind kind() const override { return ProblemKind::pde; }
  std::string name() const override { return eq_.name; }
  int input_dim() const override { return eq_.dim; }
  int output_dim() const override { return 1; }
  LossKind loss_kind() const override { return LossKind::mse; }

  const EllipticEquation& equation() const { return eq_; }
  double beta_bc() const { return beta_bc_; }

  double eval_metric(const MlpSpec& spec, const Vector& theta) const override;
  LossGradient local_loss_and_gradient(const MlpSpec& spec, const Vector& theta, const ClientData& client,
                                       std::span<const Eigen::Index> batch = {}) const override;
  std::unique_ptr<FisherOperator> fisher(const MlpSpec& spec, const ParamVector& theta,
                                         const ClientData& client) const override;
  ResidualBlock residual_system(const MlpSpec& spec, const Vector& theta,
                                std::span<const ClientData> clients) const override;
  ClientData make_client(int id, const Box& region, Eigen::Index n, Eigen::Index n_boundary,
                         std::mt19937_64& rng) const override;

 private:
  EllipticEquation eq_;
  double beta_bc_;
  Matrix test_inputs_;
  Vector test_exact_;
};

class ClassificationProblem : public Problem {
 public:
  ClassificationProblem(std::string name, Dataset train_pool, Dataset test, int classes);

  ProblemKind kind() const override { return ProblemKind::classification; }
  std::string name() const override { return name_; }
  int input_dim() const override { return static_cast<int>(pool_.inputs.rows()); }
  int output_dim() const override { return classes_; }
  LossKind loss_kind() const override { return LossKind::softmax_ce; }

  // Training samples, to be split across clients by a partitioner.
  const Dataset& train_pool() const { return pool_; }
  const Dataset& test_set() const { return test_; }

  double eval_metric(const MlpSpec& spec, const Vector& theta) const override;
  LossGradient local_loss_and_gradient(const MlpSpec& spec, const Vector& theta, const ClientData& client,
                                       std::span<const Eigen::Index> batch = {}) const override;
  std::unique_ptr<FisherOperator> fisher(const MlpSpec& spec, const ParamVector& theta,
                                         const ClientData& client) const override;

 private:
  std::string name_;
  Dataset pool_;
  Dataset test_;
  int classes_;
};

struct GaussianComponent {
  double weight = 1.0;
  Vector center;  // 2-vector
  double sigma = 0.1;
};

struct GaussianMixtureSpec {
  std::vector<GaussianComponent> components;

  void validate() const;
  double operator()(const Vector& x) const;
};

// Six components with weights in [0.5, 1.5], centres in [0.15, 0.85]^2 and
// widths in [0.08, 0.2].
GaussianMixtureSpec random_gaussian_mixture(std::uint64_t seed, int count = 6);

std::unique_ptr<RegressionProblem> sine_target(int frequency);
std::unique_ptr<RegressionProblem> gaussian_mixture_target(const GaussianMixtureSpec& spec);

EllipticEquation poisson_equation(int dim);
std::unique_ptr<PdeProblem> poisson_problem(int dim, double beta_bc = 100.0);

enum class EllipticKind { allen_cahn, bratu, fisher, reaction_diffusion };

// Coefficient of the reaction term: epsilon for Allen-Cahn, lambda for Bratu,
// rho for Fisher, kappa for reaction-diffusion.
struct EllipticParams {
  double coefficient = 1.0;
};

EllipticKind parse_elliptic_kind(const std::string& name);
const char* to_string(EllipticKind kind);
EllipticEquation nonlinear_elliptic_equation(EllipticKind kind, EllipticParams params = {});
std::unique_ptr<PdeProblem> nonlinear_elliptic_problem(EllipticKind kind, EllipticParams params = {},
                                                       double beta_bc = 100.0);

struct BlobData {
  Dataset data;
  Matrix centers;  // d x n_classes
};

// One isotropic unit-variance Gaussian blob per class, centres drawn
// uniformly on the sphere of radius `spread`.
BlobData synthetic_classification(int n_classes, int n_per_class, int dim, double spread, std::uint64_t seed);
// Same blobs, fresh samples.
Dataset sample_blobs(const Matrix& centers, int n_per_class, std::uint64_t seed);

std::unique_ptr<ClassificationProblem> blob_classification(int n_classes, int n_train_per_class,
                                                           int n_test_per_class, int dim, double spread,
                                                           std::uint64_t seed);

// Evenly spaced test grids over [0,1]^d: n points for d = 1, n x n for d = 2,
// and a fixed seeded point cloud of n^2 points otherwise.
Matrix unit_grid(int dim, int n);

double mse_metric(const Vector& predicted, const Vector& exact);
double relative_l2(const Vector& predicted, const Vector& exact);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

}  // namespace fipa
