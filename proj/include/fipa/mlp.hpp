#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fipa/linalg.hpp"

namespace fipa {

using linalg::Matrix;
using linalg::Vector;

enum class Activation { tanh, relu, identity };
enum class LossKind { mse, softmax_ce };

const char* to_string(Activation a);
Activation parse_activation(const std::string& name);
const char* to_string(LossKind k);

// Fully connected network. widths = {d, hidden..., C}; hidden layers use
// `hidden_activations`, the output layer is always identity.
struct MlpSpec {
  std::vector<int> widths;
  std::vector<Activation> hidden_activations;

  static MlpSpec uniform(std::vector<int> widths, Activation act);

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  std::size_t layer_count() const { return widths.size() - 1; }
  Eigen::Index param_count() const;
  // Offset of layer l's weight block in the flat parameter vector. Weights are
  // stored row-major (out x in) followed by the out biases.
  Eigen::Index layer_offset(std::size_t l) const;
  void validate() const;
};

// Flat parameters with a trainable mask. Coordinates with mask == false are
// frozen: the mutators below never touch them.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(Vector values);
  ParamVector(Vector values, std::vector<bool> mask);

  const Vector& values() const { return values_; }
  const std::vector<bool>& mask() const { return mask_; }
  Eigen::Index size() const { return values_.size(); }
  Eigen::Index trainable_count() const { return static_cast<Eigen::Index>(trainable_.size()); }
  const std::vector<Eigen::Index>& trainable_indices() const { return trainable_; }
  bool all_trainable() const { return trainable_count() == size(); }

  // Full-length vector -> trainable coordinates.
  Vector gather(const Vector& full) const;
  // Trainable coordinates -> full-length vector with zeros elsewhere.
  Vector scatter(const Vector& reduced) const;
  // Columns of a (rows x p) matrix restricted to trainable coordinates.
  Matrix gather_columns(const Matrix& full) const;

  Vector trainable_values() const { return gather(values_); }
  void add_to_trainable(const Vector& reduced_delta);
  void set_trainable(const Vector& reduced_values);

 private:
  void rebuild_index();

  Vector values_;
  std::vector<bool> mask_;
  std::vector<Eigen::Index> trainable_;
};

// Mask with the weights and biases of the listed layers (0-based) trainable.
std::vector<bool> layer_mask(const MlpSpec& spec, const std::vector<int>& trainable_layers);

// Column-major sample storage: inputs is d x N, targets C x N for
// regression; classification uses integer labels instead of targets.
struct Dataset {
  Matrix inputs;
  Matrix targets;
  std::vector<int> labels;

  Eigen::Index size() const { return inputs.cols(); }
  bool has_labels() const { return !labels.empty(); }
  Dataset subset(std::span<const Eigen::Index> indices) const;
  static Dataset concat(std::span<const Dataset* const> parts);
};

// Glorot-uniform weights, zero biases.
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed);

Vector forward(const MlpSpec& spec, const Vector& theta, const Vector& x);
// Outputs for a batch of inputs (d x N) -> (C x N).
Matrix forward_batch(const MlpSpec& spec, const Vector& theta, const Matrix& inputs);

// C x p Jacobian of the network output with respect to all parameters.
Matrix param_jacobian(const MlpSpec& spec, const Vector& theta, const Vector& x);
// Stacked per-sample Jacobians, (N*C) x p with row i*C + c = d f_c(x_i) / d theta.
Matrix batch_jacobian(const MlpSpec& spec, const Vector& theta, const Matrix& inputs);

struct OutputHessian {
  LossKind kind;
  Matrix matrix;
};

// d^2 loss / dz^2 at logits z: identity for MSE, Diag(p) - p p^T for softmax.
OutputHessian output_hessian(LossKind kind, const Vector& z);

Vector softmax(const Vector& z);

struct LossGradient {
  double loss = 0.0;
  Vector grad;
};

// Mean per-sample loss (0.5 ||f - y||^2 for MSE, -log p_y for softmax CE) and
// its gradient. The gradient is zeroed on frozen coordinates.
LossGradient loss_and_gradient(const MlpSpec& spec, const ParamVector& theta,
                               const Dataset& data, LossKind kind);
// Same on raw parameters, no masking.
LossGradient loss_and_gradient(const MlpSpec& spec, const Vector& theta,
                               const Dataset& data, LossKind kind);

double mean_loss(const MlpSpec& spec, const Vector& theta, const Dataset& data, LossKind kind);

struct ValueLaplacian {
  double value = 0.0;
  double laplacian = 0.0;
};

// Forward pass carrying first and second input derivatives along each input
// coordinate, kept so the parameter gradient of any combination
// a*u + b*lap(u) can be pulled back afterwards. Scalar-output tanh/identity
// networks only.
class LaplacianTape {
 public:
  LaplacianTape(const MlpSpec& spec, const Vector& theta, const Vector& x);

  double value() const { return value_; }
  double laplacian() const { return laplacian_; }
  // value_weight * du/dtheta + laplacian_weight * d(lap u)/dtheta
  Vector pullback(double value_weight, double laplacian_weight) const;

 private:
  const MlpSpec& spec_;
  const Vector& theta_;
  // Per layer l = 0..L: activations and their input derivatives along each
  // coordinate (index [l][i]). Pre-activation tangents are kept for l >= 1.
  std::vector<Vector> act_;
  std::vector<std::vector<Vector>> dact_;
  std::vector<std::vector<Vector>> ddact_;
  std::vector<Vector> pre_;
  std::vector<std::vector<Vector>> dpre_;
  std::vector<std::vector<Vector>> ddpre_;
  double value_ = 0.0;
  double laplacian_ = 0.0;
};

ValueLaplacian input_laplacian(const MlpSpec& spec, const Vector& theta, const Vector& x);

}  // namespace fipa
