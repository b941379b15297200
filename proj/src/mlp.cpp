#include "fipa/mlp.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace fipa {

namespace {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct LayerView {
  RowMajorMap w;
  Eigen::Map<const Vector> b;
};

LayerView layer_view(const MlpSpec& spec, const Vector& theta, std::size_t l) {
  const Eigen::Index off = spec.layer_offset(l);
  const int in = spec.widths[l];
  const int out = spec.widths[l + 1];
  return {RowMajorMap(theta.data() + off, out, in),
          Eigen::Map<const Vector>(theta.data() + off + static_cast<Eigen::Index>(in) * out, out)};
}

Activation activation_of(const MlpSpec& spec, std::size_t l) {
  return l + 1 < spec.layer_count() ? spec.hidden_activations[l] : Activation::identity;
}

void check_theta(const MlpSpec& spec, const Vector& theta) {
  if (theta.size() != spec.param_count()) {
    throw std::invalid_argument("parameter vector has length " + std::to_string(theta.size()) +
                                ", model expects " + std::to_string(spec.param_count()));
  }
}

void check_input(const MlpSpec& spec, Eigen::Index rows) {
  if (rows != spec.input_dim()) {
    throw std::invalid_argument("input has dimension " + std::to_string(rows) + ", model expects " +
                                std::to_string(spec.input_dim()));
  }
}

template <typename Derived>
Matrix apply_activation(Activation act, const Eigen::MatrixBase<Derived>& z) {
  switch (act) {
    case Activation::tanh:
      return z.array().tanh().matrix();
    case Activation::relu:
      return z.array().max(0.0).matrix();
    case Activation::identity:
      break;
  }
  return z;
}

// sigma'(z) expressed through z and a = sigma(z).
Matrix activation_slope(Activation act, const Matrix& z, const Matrix& a) {
  switch (act) {
    case Activation::tanh:
      return (1.0 - a.array().square()).matrix();
    case Activation::relu:
      return (z.array() > 0.0).cast<double>().matrix();
    case Activation::identity:
      break;
  }
  return Matrix::Ones(z.rows(), z.cols());
}

struct BatchForward {
  std::vector<Matrix> act;    // act[0] = inputs, act[l+1] = layer l output
  std::vector<Matrix> slope;  // slope[l] = sigma'(z_l) for layer l
};

BatchForward run_forward(const MlpSpec& spec, const Vector& theta, const Matrix& inputs) {
  BatchForward f;
  f.act.reserve(spec.layer_count() + 1);
  f.slope.reserve(spec.layer_count());
  f.act.push_back(inputs);
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const LayerView lv = layer_view(spec, theta, l);
    Matrix z = lv.w * f.act.back();
    z.colwise() += lv.b;
    const Activation act = activation_of(spec, l);
    Matrix a = apply_activation(act, z);
    f.slope.push_back(activation_slope(act, z, a));
    f.act.push_back(std::move(a));
  }
  return f;
}

// Backpropagate output-space adjoints (C x N) and return the summed
// parameter gradient.
Vector backprop_sum(const MlpSpec& spec, const Vector& theta, const BatchForward& f, Matrix delta) {
  Vector grad = Vector::Zero(spec.param_count());
  for (std::size_t l = spec.layer_count(); l-- > 0;) {
    const Eigen::Index off = spec.layer_offset(l);
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    delta.array() *= f.slope[l].array();
    const Matrix gw = delta * f.act[l].transpose();
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(grad.data() + off, out, in) = gw;
    grad.segment(off + static_cast<Eigen::Index>(in) * out, out) = delta.rowwise().sum();
    if (l > 0) {
      const LayerView lv = layer_view(spec, theta, l);
      delta = lv.w.transpose() * delta;
    }
  }
  return grad;
}

struct Derivs {
  double s1, s2, s3;
};

Derivs scalar_derivs(Activation act, double z) {
  switch (act) {
    case Activation::tanh: {
      const double t = std::tanh(z);
      const double s1 = 1.0 - t * t;
      return {s1, -2.0 * t * s1, s1 * (6.0 * t * t - 2.0)};
    }
    case Activation::identity:
      return {1.0, 0.0, 0.0};
    case Activation::relu:
      break;
  }
  throw std::invalid_argument("second input derivatives need a C^2 activation (tanh or identity), got relu");
}

}  // namespace

const char* to_string(Activation a) {
  switch (a) {
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
    case Activation::identity:
      return "identity";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

const char* to_string(LossKind k) { return k == LossKind::mse ? "mse" : "softmax_ce"; }

MlpSpec MlpSpec::uniform(std::vector<int> widths, Activation act) {
  MlpSpec s;
  s.widths = std::move(widths);
  if (s.widths.size() >= 2) s.hidden_activations.assign(s.widths.size() - 2, act);
  s.validate();
  return s;
}

Eigen::Index MlpSpec::param_count() const {
  Eigen::Index p = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    p += static_cast<Eigen::Index>(widths[l]) * widths[l + 1] + widths[l + 1];
  }
  return p;
}

Eigen::Index MlpSpec::layer_offset(std::size_t l) const {
  Eigen::Index off = 0;
  for (std::size_t k = 0; k < l; ++k) {
    off += static_cast<Eigen::Index>(widths[k]) * widths[k + 1] + widths[k + 1];
  }
  return off;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw std::invalid_argument("MLP needs at least input and output widths");
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("MLP widths must be >= 1");
  }
  if (hidden_activations.size() != widths.size() - 2) {
    throw std::invalid_argument("MLP needs one activation per hidden layer");
  }
}

std::vector<bool> layer_mask(const MlpSpec& spec, const std::vector<int>& trainable_layers) {
  spec.validate();
  std::vector<bool> mask(static_cast<std::size_t>(spec.param_count()), false);
  for (int l : trainable_layers) {
    if (l < 0 || static_cast<std::size_t>(l) >= spec.layer_count()) {
      throw std::invalid_argument("layer_mask: layer " + std::to_string(l) + " out of range");
    }
    const auto lu = static_cast<std::size_t>(l);
    const Eigen::Index end = lu + 1 < spec.layer_count() ? spec.layer_offset(lu + 1) : spec.param_count();
    for (Eigen::Index i = spec.layer_offset(lu); i < end; ++i) mask[static_cast<std::size_t>(i)] = true;
  }
  return mask;
}

ParamVector::ParamVector(Vector values) : values_(std::move(values)), mask_(values_.size(), true) {
  rebuild_index();
}

ParamVector::ParamVector(Vector values, std::vector<bool> mask)
    : values_(std::move(values)), mask_(std::move(mask)) {
  if (static_cast<Eigen::Index>(mask_.size()) != values_.size()) {
    throw std::invalid_argument("trainable mask length does not match parameter count");
  }
  rebuild_index();
}

void ParamVector::rebuild_index() {
  trainable_.clear();
  for (std::size_t i = 0; i < mask_.size(); ++i) {
    if (mask_[i]) trainable_.push_back(static_cast<Eigen::Index>(i));
  }
}

Vector ParamVector::gather(const Vector& full) const {
  if (full.size() != size()) throw std::invalid_argument("gather: length mismatch");
  Vector out(trainable_count());
  for (Eigen::Index k = 0; k < trainable_count(); ++k) out(k) = full(trainable_[k]);
  return out;
}

Vector ParamVector::scatter(const Vector& reduced) const {
  if (reduced.size() != trainable_count()) throw std::invalid_argument("scatter: length mismatch");
  Vector out = Vector::Zero(size());
  for (Eigen::Index k = 0; k < trainable_count(); ++k) out(trainable_[k]) = reduced(k);
  return out;
}

Matrix ParamVector::gather_columns(const Matrix& full) const {
  if (full.cols() != size()) throw std::invalid_argument("gather_columns: width mismatch");
  if (all_trainable()) return full;
  Matrix out(full.rows(), trainable_count());
  for (Eigen::Index k = 0; k < trainable_count(); ++k) out.col(k) = full.col(trainable_[k]);
  return out;
}

void ParamVector::add_to_trainable(const Vector& reduced_delta) {
  if (reduced_delta.size() != trainable_count()) throw std::invalid_argument("delta length mismatch");
  for (Eigen::Index k = 0; k < trainable_count(); ++k) values_(trainable_[k]) += reduced_delta(k);
}

void ParamVector::set_trainable(const Vector& reduced_values) {
  if (reduced_values.size() != trainable_count()) throw std::invalid_argument("value length mismatch");
  for (Eigen::Index k = 0; k < trainable_count(); ++k) values_(trainable_[k]) = reduced_values(k);
}

Dataset Dataset::subset(std::span<const Eigen::Index> indices) const {
  Dataset out;
  const auto n = static_cast<Eigen::Index>(indices.size());
  out.inputs.resize(inputs.rows(), n);
  if (targets.size() > 0) out.targets.resize(targets.rows(), n);
  if (has_labels()) out.labels.resize(indices.size());
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index i = indices[static_cast<std::size_t>(k)];
    out.inputs.col(k) = inputs.col(i);
    if (targets.size() > 0) out.targets.col(k) = targets.col(i);
    if (has_labels()) out.labels[static_cast<std::size_t>(k)] = labels[static_cast<std::size_t>(i)];
  }
  return out;
}

Dataset Dataset::concat(std::span<const Dataset* const> parts) {
  Dataset out;
  if (parts.empty()) return out;
  Eigen::Index n = 0;
  for (const Dataset* d : parts) n += d->size();
  const Dataset& first = *parts.front();
  out.inputs.resize(first.inputs.rows(), n);
  if (first.targets.size() > 0) out.targets.resize(first.targets.rows(), n);
  Eigen::Index at = 0;
  for (const Dataset* d : parts) {
    out.inputs.middleCols(at, d->size()) = d->inputs;
    if (first.targets.size() > 0) out.targets.middleCols(at, d->size()) = d->targets;
    out.labels.insert(out.labels.end(), d->labels.begin(), d->labels.end());
    at += d->size();
  }
  return out;
}

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Vector theta = Vector::Zero(spec.param_count());
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const double limit = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    const Eigen::Index off = spec.layer_offset(l);
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(in) * out; ++k) theta(off + k) = dist(rng);
  }
  return ParamVector(std::move(theta));
}

Vector forward(const MlpSpec& spec, const Vector& theta, const Vector& x) {
  check_theta(spec, theta);
  check_input(spec, x.size());
  Vector a = x;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const LayerView lv = layer_view(spec, theta, l);
    Vector z = lv.w * a + lv.b;
    a = apply_activation(activation_of(spec, l), z);
  }
  return a;
}

Matrix forward_batch(const MlpSpec& spec, const Vector& theta, const Matrix& inputs) {
  check_theta(spec, theta);
  check_input(spec, inputs.rows());
  Matrix a = inputs;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const LayerView lv = layer_view(spec, theta, l);
    Matrix z = lv.w * a;
    z.colwise() += lv.b;
    a = apply_activation(activation_of(spec, l), z);
  }
  return a;
}

Matrix param_jacobian(const MlpSpec& spec, const Vector& theta, const Vector& x) {
  return batch_jacobian(spec, theta, x);
}

Matrix batch_jacobian(const MlpSpec& spec, const Vector& theta, const Matrix& inputs) {
  check_theta(spec, theta);
  check_input(spec, inputs.rows());
  const BatchForward f = run_forward(spec, theta, inputs);
  const Eigen::Index n = inputs.cols();
  const int c_out = spec.output_dim();
  Matrix jac = Matrix::Zero(n * c_out, spec.param_count());

  for (int c = 0; c < c_out; ++c) {
    Matrix delta = Matrix::Zero(c_out, n);
    delta.row(c).setOnes();
    for (std::size_t l = spec.layer_count(); l-- > 0;) {
      const Eigen::Index off = spec.layer_offset(l);
      const int in = spec.widths[l];
      const int out = spec.widths[l + 1];
      delta.array() *= f.slope[l].array();
      const Matrix& prev = f.act[l];
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index row = i * c_out + c;
        for (int j = 0; j < out; ++j) {
          const double dj = delta(j, i);
          const Eigen::Index base = off + static_cast<Eigen::Index>(j) * in;
          for (int k = 0; k < in; ++k) jac(row, base + k) = dj * prev(k, i);
          jac(row, off + static_cast<Eigen::Index>(in) * out + j) = dj;
        }
      }
      if (l > 0) {
        const LayerView lv = layer_view(spec, theta, l);
        delta = lv.w.transpose() * delta;
      }
    }
  }
  return jac;
}

Vector softmax(const Vector& z) {
  const double zmax = z.maxCoeff();
  Vector e = (z.array() - zmax).exp().matrix();
  return e / e.sum();
}

OutputHessian output_hessian(LossKind kind, const Vector& z) {
  if (!z.allFinite()) throw std::invalid_argument("output_hessian: non-finite logits");
  if (kind == LossKind::mse) return {kind, Matrix::Identity(z.size(), z.size())};
  const Vector p = softmax(z);
  Matrix s = -p * p.transpose();
  s.diagonal() += p;
  return {kind, s};
}

LossGradient loss_and_gradient(const MlpSpec& spec, const Vector& theta, const Dataset& data, LossKind kind) {
  check_theta(spec, theta);
  if (data.size() == 0) throw std::invalid_argument("loss_and_gradient: empty dataset");
  const BatchForward f = run_forward(spec, theta, data.inputs);
  const Matrix& out = f.act.back();
  const auto n = static_cast<double>(data.size());

  LossGradient lg;
  Matrix delta;
  if (kind == LossKind::mse) {
    if (data.targets.rows() != out.rows() || data.targets.cols() != out.cols()) {
      throw std::invalid_argument("loss_and_gradient: target shape does not match model output");
    }
    delta = out - data.targets;
    lg.loss = 0.5 * delta.squaredNorm() / n;
  } else {
    if (static_cast<Eigen::Index>(data.labels.size()) != data.size()) {
      throw std::invalid_argument("loss_and_gradient: softmax loss needs one label per sample");
    }
    delta.resize(out.rows(), out.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < out.cols(); ++i) {
      const int y = data.labels[static_cast<std::size_t>(i)];
      if (y < 0 || y >= out.rows()) throw std::invalid_argument("label out of range");
      const Vector z = out.col(i);
      const double zmax = z.maxCoeff();
      const double lse = zmax + std::log((z.array() - zmax).exp().sum());
      total += lse - z(y);
      delta.col(i) = (z.array() - lse).exp().matrix();
      delta(y, i) -= 1.0;
    }
    lg.loss = total / n;
  }
  delta /= n;
  lg.grad = backprop_sum(spec, theta, f, std::move(delta));
  return lg;
}

LossGradient loss_and_gradient(const MlpSpec& spec, const ParamVector& theta, const Dataset& data,
                               LossKind kind) {
  LossGradient lg = loss_and_gradient(spec, theta.values(), data, kind);
  if (!theta.all_trainable()) {
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (!theta.mask()[static_cast<std::size_t>(i)]) lg.grad(i) = 0.0;
    }
  }
  return lg;
}

double mean_loss(const MlpSpec& spec, const Vector& theta, const Dataset& data, LossKind kind) {
  const Matrix out = forward_batch(spec, theta, data.inputs);
  const auto n = static_cast<double>(data.size());
  if (kind == LossKind::mse) return 0.5 * (out - data.targets).squaredNorm() / n;
  double total = 0.0;
  for (Eigen::Index i = 0; i < out.cols(); ++i) {
    const Vector z = out.col(i);
    const double zmax = z.maxCoeff();
    total += zmax + std::log((z.array() - zmax).exp().sum()) - z(data.labels[static_cast<std::size_t>(i)]);
  }
  return total / n;
}

LaplacianTape::LaplacianTape(const MlpSpec& spec, const Vector& theta, const Vector& x)
    : spec_(spec), theta_(theta) {
  check_theta(spec, theta);
  check_input(spec, x.size());
  if (spec.output_dim() != 1) throw std::invalid_argument("input Laplacian needs a scalar-output network");
  for (Activation a : spec.hidden_activations) {
    if (a == Activation::relu) {
      throw std::invalid_argument("input Laplacian needs a C^2 activation (tanh or identity), got relu");
    }
  }
  const std::size_t layers = spec.layer_count();
  const int d = spec.input_dim();
  act_.resize(layers + 1);
  dact_.assign(layers + 1, std::vector<Vector>(static_cast<std::size_t>(d)));
  ddact_.assign(layers + 1, std::vector<Vector>(static_cast<std::size_t>(d)));
  pre_.resize(layers + 1);
  dpre_.assign(layers + 1, std::vector<Vector>(static_cast<std::size_t>(d)));
  ddpre_.assign(layers + 1, std::vector<Vector>(static_cast<std::size_t>(d)));

  act_[0] = x;
  for (int i = 0; i < d; ++i) {
    dact_[0][static_cast<std::size_t>(i)] = Vector::Unit(d, i);
    ddact_[0][static_cast<std::size_t>(i)] = Vector::Zero(d);
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const LayerView lv = layer_view(spec, theta, l);
    const Activation act = activation_of(spec, l);
    pre_[l + 1] = lv.w * act_[l] + lv.b;
    const Eigen::Index w = pre_[l + 1].size();
    Vector s1(w), s2(w);
    act_[l + 1].resize(w);
    for (Eigen::Index j = 0; j < w; ++j) {
      const Derivs dv = scalar_derivs(act, pre_[l + 1](j));
      s1(j) = dv.s1;
      s2(j) = dv.s2;
      act_[l + 1](j) = act == Activation::tanh ? std::tanh(pre_[l + 1](j)) : pre_[l + 1](j);
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(d); ++i) {
      dpre_[l + 1][i] = lv.w * dact_[l][i];
      ddpre_[l + 1][i] = lv.w * ddact_[l][i];
      const Vector& dz = dpre_[l + 1][i];
      dact_[l + 1][i] = s1.cwiseProduct(dz);
      ddact_[l + 1][i] = s2.cwiseProduct(dz.cwiseProduct(dz)) + s1.cwiseProduct(ddpre_[l + 1][i]);
    }
  }
  value_ = act_[layers](0);
  laplacian_ = 0.0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(d); ++i) laplacian_ += ddact_[layers][i](0);
}

Vector LaplacianTape::pullback(double value_weight, double laplacian_weight) const {
  const std::size_t layers = spec_.layer_count();
  const auto d = static_cast<std::size_t>(spec_.input_dim());
  Vector grad = Vector::Zero(spec_.param_count());

  Vector abar = Vector::Constant(1, value_weight);
  std::vector<Vector> dabar(d, Vector::Zero(1));
  std::vector<Vector> ddabar(d, Vector::Constant(1, laplacian_weight));

  for (std::size_t l = layers; l-- > 0;) {
    const Activation act = activation_of(spec_, l);
    const Vector& z = pre_[l + 1];
    const Eigen::Index w = z.size();
    Vector s1(w), s2(w), s3(w);
    for (Eigen::Index j = 0; j < w; ++j) {
      const Derivs dv = scalar_derivs(act, z(j));
      s1(j) = dv.s1;
      s2(j) = dv.s2;
      s3(j) = dv.s3;
    }
    Vector zbar = abar.cwiseProduct(s1);
    std::vector<Vector> dzbar(d), ddzbar(d);
    for (std::size_t i = 0; i < d; ++i) {
      const Vector& dz = dpre_[l + 1][i];
      const Vector& ddz = ddpre_[l + 1][i];
      dzbar[i] = dabar[i].cwiseProduct(s1) + 2.0 * ddabar[i].cwiseProduct(s2).cwiseProduct(dz);
      zbar += dabar[i].cwiseProduct(s2).cwiseProduct(dz) +
              ddabar[i].cwiseProduct(s3.cwiseProduct(dz.cwiseProduct(dz)) + s2.cwiseProduct(ddz));
      ddzbar[i] = ddabar[i].cwiseProduct(s1);
    }

    const Eigen::Index off = spec_.layer_offset(l);
    const int in = spec_.widths[l];
    const int out = spec_.widths[l + 1];
    Matrix gw = zbar * act_[l].transpose();
    for (std::size_t i = 0; i < d; ++i) {
      gw.noalias() += dzbar[i] * dact_[l][i].transpose();
      gw.noalias() += ddzbar[i] * ddact_[l][i].transpose();
    }
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(grad.data() + off, out, in) = gw;
    grad.segment(off + static_cast<Eigen::Index>(in) * out, out) = zbar;

    if (l > 0) {
      const LayerView lv = layer_view(spec_, theta_, l);
      abar = lv.w.transpose() * zbar;
      for (std::size_t i = 0; i < d; ++i) {
        dabar[i] = lv.w.transpose() * dzbar[i];
        ddabar[i] = lv.w.transpose() * ddzbar[i];
      }
    }
  }
  return grad;
}

ValueLaplacian input_laplacian(const MlpSpec& spec, const Vector& theta, const Vector& x) {
  const LaplacianTape tape(spec, theta, x);
  return {tape.value(), tape.laplacian()};
}

}  // namespace fipa
