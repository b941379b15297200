#include "fipa/problems.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fipa {

namespace {

constexpr double kPi = std::numbers::pi;

Vector predict_scalar(const MlpSpec& spec, const Vector& theta, const Matrix& inputs) {
  return forward_batch(spec, theta, inputs).row(0).transpose();
}

// Boundary points spread over the faces of the domain, face i mod 2d for the
// i-th point, uniform within the face. Every client sees the whole boundary.
Matrix sample_domain_boundary(const Box& domain, Eigen::Index n, std::mt19937_64& rng) {
  const int d = domain.dim();
  Matrix pts(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto face = static_cast<int>(i % (2 * d));
    Vector x = domain.sample(rng);
    const int axis = face / 2;
    x(axis) = face % 2 == 0 ? domain.lo(axis) : domain.hi(axis);
    pts.col(i) = x;
  }
  return pts;
}

}  // namespace

Box Box::unit(int dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

bool Box::contains(const Vector& x, double tol) const {
  if (x.size() != lo.size()) return false;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x(i) < lo(i) - tol || x(i) > hi(i) + tol) return false;
  }
  return true;
}

Vector Box::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector x(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i) x(i) = lo(i) + (hi(i) - lo(i)) * unit(rng);
  return x;
}

double Problem::local_loss(const MlpSpec& spec, const Vector& theta, const ClientData& client) const {
  return local_loss_and_gradient(spec, theta, client).loss;
}

ResidualBlock Problem::residual_system(const MlpSpec&, const Vector&, std::span<const ClientData>) const {
  throw std::invalid_argument("problem '" + name() + "' is not a least-squares problem");
}

ClientData Problem::make_client(int, const Box&, Eigen::Index, Eigen::Index, std::mt19937_64&) const {
  throw std::invalid_argument("problem '" + name() + "' does not sample client data from regions");
}

// ---------------------------------------------------------------------------

RegressionProblem::RegressionProblem(std::string name, Box domain, Target target, Matrix test_inputs)
    : name_(std::move(name)), domain_(std::move(domain)), target_(std::move(target)),
      test_inputs_(std::move(test_inputs)) {
  test_targets_.resize(test_inputs_.cols());
  for (Eigen::Index i = 0; i < test_inputs_.cols(); ++i) test_targets_(i) = target_(test_inputs_.col(i));
}

double RegressionProblem::eval_metric(const MlpSpec& spec, const Vector& theta) const {
  return mse_metric(predict_scalar(spec, theta, test_inputs_), test_targets_);
}

LossGradient RegressionProblem::local_loss_and_gradient(const MlpSpec& spec, const Vector& theta,
                                                        const ClientData& client,
                                                        std::span<const Eigen::Index> batch) const {
  if (batch.empty()) return loss_and_gradient(spec, theta, client.samples, LossKind::mse);
  return loss_and_gradient(spec, theta, client.samples.subset(batch), LossKind::mse);
}

std::unique_ptr<FisherOperator> RegressionProblem::fisher(const MlpSpec& spec, const ParamVector& theta,
                                                          const ClientData& client) const {
  return std::make_unique<SampleFisher>(spec, theta, client.samples, LossKind::mse);
}

ResidualBlock RegressionProblem::residual_system(const MlpSpec& spec, const Vector& theta,
                                                 std::span<const ClientData> clients) const {
  Eigen::Index total = 0;
  for (const ClientData& c : clients) total += c.sample_count();
  if (total == 0) throw std::invalid_argument("residual_system: no samples");
  ResidualBlock out;
  out.residual.resize(total);
  out.jacobian.resize(total, spec.param_count());
  const double scale = 1.0 / std::sqrt(static_cast<double>(total));
  Eigen::Index at = 0;
  for (const ClientData& c : clients) {
    const Eigen::Index n = c.sample_count();
    out.residual.segment(at, n) =
        scale * (predict_scalar(spec, theta, c.samples.inputs) - c.samples.targets.row(0).transpose());
    out.jacobian.middleRows(at, n) = scale * batch_jacobian(spec, theta, c.samples.inputs);
    at += n;
  }
  return out;
}

ClientData RegressionProblem::make_client(int id, const Box& region, Eigen::Index n, Eigen::Index,
                                          std::mt19937_64& rng) const {
  ClientData c;
  c.id = id;
  c.region = region;
  c.samples.inputs.resize(region.dim(), n);
  c.samples.targets.resize(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    c.samples.inputs.col(i) = region.sample(rng);
    c.samples.targets(0, i) = target_(c.samples.inputs.col(i));
  }
  return c;
}

// ---------------------------------------------------------------------------

PdeProblem::PdeProblem(EllipticEquation eq, double beta_bc, Matrix test_inputs)
    : eq_(std::move(eq)), beta_bc_(beta_bc), test_inputs_(std::move(test_inputs)) {
  if (!(beta_bc_ > 0.0)) throw std::invalid_argument("boundary penalty must be > 0");
  test_exact_.resize(test_inputs_.cols());
  for (Eigen::Index i = 0; i < test_inputs_.cols(); ++i) test_exact_(i) = eq_.exact(test_inputs_.col(i));
}

double PdeProblem::eval_metric(const MlpSpec& spec, const Vector& theta) const {
  return relative_l2(predict_scalar(spec, theta, test_inputs_), test_exact_);
}

LossGradient PdeProblem::local_loss_and_gradient(const MlpSpec& spec, const Vector& theta,
                                                 const ClientData& client,
                                                 std::span<const Eigen::Index> batch) const {
  if (batch.empty()) {
    return pde_loss_and_gradient(spec, theta, client.samples.inputs, client.boundary, eq_, beta_bc_);
  }
  return pde_loss_and_gradient(spec, theta, client.samples.subset(batch).inputs, client.boundary, eq_, beta_bc_);
}

std::unique_ptr<FisherOperator> PdeProblem::fisher(const MlpSpec& spec, const ParamVector& theta,
                                                   const ClientData& client) const {
  return std::make_unique<PdeFisher>(spec, theta, client.samples.inputs, client.boundary, eq_, beta_bc_);
}

ResidualBlock PdeProblem::residual_system(const MlpSpec& spec, const Vector& theta,
                                          std::span<const ClientData> clients) const {
  Eigen::Index total_interior = 0;
  Eigen::Index rows = 0;
  for (const ClientData& c : clients) {
    total_interior += c.sample_count();
    rows += c.sample_count() + c.boundary.cols();
  }
  if (total_interior == 0) throw std::invalid_argument("residual_system: no interior points");
  ResidualBlock out;
  out.residual.resize(rows);
  out.jacobian.resize(rows, spec.param_count());
  Eigen::Index at = 0;
  for (const ClientData& c : clients) {
    const double w = static_cast<double>(c.sample_count()) / static_cast<double>(total_interior);
    const ResidualBlock in = interior_residuals(spec, theta, eq_, c.samples.inputs, true);
    const double si = std::sqrt(w / static_cast<double>(c.sample_count()));
    out.residual.segment(at, in.residual.size()) = si * in.residual;
    out.jacobian.middleRows(at, in.residual.size()) = si * in.jacobian;
    at += in.residual.size();
    if (c.boundary.cols() > 0) {
      const ResidualBlock bc = boundary_residuals(spec, theta, eq_, c.boundary, true);
      const double sb = std::sqrt(w * beta_bc_ / static_cast<double>(c.boundary.cols()));
      out.residual.segment(at, bc.residual.size()) = sb * bc.residual;
      out.jacobian.middleRows(at, bc.residual.size()) = sb * bc.jacobian;
      at += bc.residual.size();
    }
  }
  return out;
}

ClientData PdeProblem::make_client(int id, const Box& region, Eigen::Index n, Eigen::Index n_boundary,
                                   std::mt19937_64& rng) const {
  ClientData c;
  c.id = id;
  c.region = region;
  c.samples.inputs.resize(region.dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) c.samples.inputs.col(i) = region.sample(rng);
  c.boundary = sample_domain_boundary(domain(), n_boundary, rng);
  return c;
}

// ---------------------------------------------------------------------------

ClassificationProblem::ClassificationProblem(std::string name, Dataset train_pool, Dataset test, int classes)
    : name_(std::move(name)), pool_(std::move(train_pool)), test_(std::move(test)), classes_(classes) {
  if (classes_ < 2) throw std::invalid_argument("classification needs at least two classes");
}

double ClassificationProblem::eval_metric(const MlpSpec& spec, const Vector& theta) const {
  const Matrix logits = forward_batch(spec, theta, test_.inputs);
  std::vector<int> pred(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    Eigen::Index arg = 0;
    logits.col(i).maxCoeff(&arg);
    pred[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return accuracy(pred, test_.labels);
}

LossGradient ClassificationProblem::local_loss_and_gradient(const MlpSpec& spec, const Vector& theta,
                                                            const ClientData& client,
                                                            std::span<const Eigen::Index> batch) const {
  if (batch.empty()) return loss_and_gradient(spec, theta, client.samples, LossKind::softmax_ce);
  return loss_and_gradient(spec, theta, client.samples.subset(batch), LossKind::softmax_ce);
}

std::unique_ptr<FisherOperator> ClassificationProblem::fisher(const MlpSpec& spec, const ParamVector& theta,
                                                              const ClientData& client) const {
  return std::make_unique<SampleFisher>(spec, theta, client.samples, LossKind::softmax_ce);
}

// ---------------------------------------------------------------------------

void GaussianMixtureSpec::validate() const {
  if (components.empty()) throw std::invalid_argument("Gaussian mixture needs at least one component");
  for (const GaussianComponent& c : components) {
    if (!(c.sigma > 0.0)) throw std::invalid_argument("Gaussian mixture widths must be > 0");
    if (c.center.size() != 2) throw std::invalid_argument("Gaussian mixture centres must be 2-vectors");
  }
}

double GaussianMixtureSpec::operator()(const Vector& x) const {
  double u = 0.0;
  for (const GaussianComponent& c : components) {
    u += c.weight * std::exp(-(x - c.center).squaredNorm() / (2.0 * c.sigma * c.sigma));
  }
  return u;
}

GaussianMixtureSpec random_gaussian_mixture(std::uint64_t seed, int count) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> weight(0.5, 1.5), center(0.15, 0.85), sigma(0.08, 0.2);
  GaussianMixtureSpec spec;
  for (int i = 0; i < count; ++i) {
    GaussianComponent c;
    c.weight = weight(rng);
    c.center = Vector(2);
    c.center(0) = center(rng);
    c.center(1) = center(rng);
    c.sigma = sigma(rng);
    spec.components.push_back(std::move(c));
  }
  return spec;
}

std::unique_ptr<RegressionProblem> sine_target(int frequency) {
  if (frequency < 1) throw std::invalid_argument("sine frequency multiplier must be >= 1");
  const double k = frequency * kPi;
  return std::make_unique<RegressionProblem>("sine" + std::to_string(frequency), Box::unit(1),
                                             [k](const Vector& x) { return std::sin(k * x(0)); }, unit_grid(1, 1000));
}

std::unique_ptr<RegressionProblem> gaussian_mixture_target(const GaussianMixtureSpec& spec) {
  spec.validate();
  return std::make_unique<RegressionProblem>("gaussian_mixture", Box::unit(2),
                                             [spec](const Vector& x) { return spec(x); }, unit_grid(2, 64));
}

EllipticEquation poisson_equation(int dim) {
  if (dim < 1) throw std::invalid_argument("Poisson dimension must be >= 1");
  EllipticEquation eq;
  eq.name = "poisson" + std::to_string(dim) + "d";
  eq.dim = dim;
  auto product = [](const Vector& x) {
    double u = 1.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) u *= std::sin(kPi * x(i));
    return u;
  };
  eq.reaction = [](double) { return 0.0; };
  eq.reaction_slope = [](double) { return 0.0; };
  eq.source = [product, dim](const Vector& x) { return dim * kPi * kPi * product(x); };
  eq.boundary_value = [](const Vector&) { return 0.0; };
  eq.exact = product;
  eq.exact_laplacian = [product, dim](const Vector& x) { return -dim * kPi * kPi * product(x); };
  return eq;
}

std::unique_ptr<PdeProblem> poisson_problem(int dim, double beta_bc) {
  return std::make_unique<PdeProblem>(poisson_equation(dim), beta_bc, unit_grid(dim, dim == 1 ? 1000 : 64));
}

EllipticKind parse_elliptic_kind(const std::string& name) {
  if (name == "allen_cahn") return EllipticKind::allen_cahn;
  if (name == "bratu") return EllipticKind::bratu;
  if (name == "fisher") return EllipticKind::fisher;
  if (name == "reaction_diffusion") return EllipticKind::reaction_diffusion;
  throw std::invalid_argument("unknown nonlinear elliptic kind '" + name + "'");
}

const char* to_string(EllipticKind kind) {
  switch (kind) {
    case EllipticKind::allen_cahn:
      return "allen_cahn";
    case EllipticKind::bratu:
      return "bratu";
    case EllipticKind::fisher:
      return "fisher";
    case EllipticKind::reaction_diffusion:
      return "reaction_diffusion";
  }
  return "?";
}

EllipticEquation nonlinear_elliptic_equation(EllipticKind kind, EllipticParams params) {
  const double c = params.coefficient;
  EllipticEquation eq;
  eq.name = to_string(kind);
  eq.dim = 1;
  switch (kind) {
    case EllipticKind::allen_cahn:
      if (!(c > 0.0)) throw std::invalid_argument("Allen-Cahn epsilon must be > 0");
      eq.reaction = [c](double u) { return (u * u * u - u) / (c * c); };
      eq.reaction_slope = [c](double u) { return (3.0 * u * u - 1.0) / (c * c); };
      break;
    case EllipticKind::bratu:
      eq.reaction = [c](double u) { return -c * std::exp(u); };
      eq.reaction_slope = [c](double u) { return -c * std::exp(u); };
      break;
    case EllipticKind::fisher:
      eq.reaction = [c](double u) { return -c * u * (1.0 - u); };
      eq.reaction_slope = [c](double u) { return -c * (1.0 - 2.0 * u); };
      break;
    case EllipticKind::reaction_diffusion:
      eq.reaction = [c](double u) { return c * u * u; };
      eq.reaction_slope = [c](double u) { return 2.0 * c * u; };
      break;
  }
  // Manufactured solution u* = sin(pi x), so f = pi^2 sin(pi x) + G(u*).
  eq.exact = [](const Vector& x) { return std::sin(kPi * x(0)); };
  eq.exact_laplacian = [](const Vector& x) { return -kPi * kPi * std::sin(kPi * x(0)); };
  eq.source = [g = eq.reaction](const Vector& x) {
    const double u = std::sin(kPi * x(0));
    return kPi * kPi * u + g(u);
  };
  eq.boundary_value = [](const Vector&) { return 0.0; };
  return eq;
}

std::unique_ptr<PdeProblem> nonlinear_elliptic_problem(EllipticKind kind, EllipticParams params, double beta_bc) {
  return std::make_unique<PdeProblem>(nonlinear_elliptic_equation(kind, params), beta_bc, unit_grid(1, 1000));
}

// ---------------------------------------------------------------------------

Dataset sample_blobs(const Matrix& centers, int n_per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index d = centers.rows();
  const auto classes = static_cast<int>(centers.cols());
  Dataset data;
  data.inputs.resize(d, static_cast<Eigen::Index>(classes) * n_per_class);
  Eigen::Index at = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      for (Eigen::Index k = 0; k < d; ++k) data.inputs(k, at) = centers(k, c) + normal(rng);
      data.labels.push_back(c);
      ++at;
    }
  }
  return data;
}

BlobData synthetic_classification(int n_classes, int n_per_class, int dim, double spread, std::uint64_t seed) {
  if (n_classes < 2) throw std::invalid_argument("synthetic classification needs at least two classes");
  if (dim < 1 || n_per_class < 0) throw std::invalid_argument("invalid blob dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  BlobData out;
  out.centers.resize(dim, n_classes);
  for (int c = 0; c < n_classes; ++c) {
    Vector dir(dim);
    for (int k = 0; k < dim; ++k) dir(k) = normal(rng);
    out.centers.col(c) = spread * dir / dir.norm();
  }
  out.data = sample_blobs(out.centers, n_per_class, rng());
  return out;
}

std::unique_ptr<ClassificationProblem> blob_classification(int n_classes, int n_train_per_class,
                                                           int n_test_per_class, int dim, double spread,
                                                           std::uint64_t seed) {
  BlobData train = synthetic_classification(n_classes, n_train_per_class, dim, spread, seed);
  Dataset test = sample_blobs(train.centers, n_test_per_class, seed ^ 0x5deece66dULL);
  return std::make_unique<ClassificationProblem>("blobs", std::move(train.data), std::move(test), n_classes);
}

Matrix unit_grid(int dim, int n) {
  if (dim < 1 || n < 1) throw std::invalid_argument("unit_grid: invalid size");
  auto coord = [n](int i) { return n == 1 ? 0.5 : static_cast<double>(i) / (n - 1); };
  if (dim == 1) {
    Matrix g(1, n);
    for (int i = 0; i < n; ++i) g(0, i) = coord(i);
    return g;
  }
  if (dim == 2) {
    Matrix g(2, static_cast<Eigen::Index>(n) * n);
    Eigen::Index at = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        g(0, at) = coord(j);
        g(1, at) = coord(i);
        ++at;
      }
    }
    return g;
  }
  std::mt19937_64 rng(0x1234 + static_cast<std::uint64_t>(dim));
  const Box box = Box::unit(dim);
  Matrix g(dim, static_cast<Eigen::Index>(n) * n);
  for (Eigen::Index i = 0; i < g.cols(); ++i) g.col(i) = box.sample(rng);
  return g;
}

double mse_metric(const Vector& predicted, const Vector& exact) {
  if (predicted.size() != exact.size() || exact.size() == 0) throw std::invalid_argument("mse: size mismatch");
  return (predicted - exact).squaredNorm() / static_cast<double>(exact.size());
}

double relative_l2(const Vector& predicted, const Vector& exact) {
  if (predicted.size() != exact.size() || exact.size() == 0) throw std::invalid_argument("relative_l2: size mismatch");
  const double denom = exact.norm();
  if (denom == 0.0) throw std::invalid_argument("relative_l2: exact solution vanishes on the test grid");
  return (predicted - exact).norm() / denom;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw std::invalid_argument("accuracy: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace fipa
