#pragma once

// Time-conditioned MLP vector field v_t(x; theta) with hand-written first and
// second order derivatives.
//
// Architecture: `hidden_layers` ELU layers of `hidden_width` units followed by
// a linear output layer of size `input_dim`. Every layer (output included)
// receives t as one extra input appended after its regular inputs.
//
// Parameter layout, layer by layer from input to output: the weight matrix,
// column-major (out x in, entry (o, i) at offset i * out + o, the last
// column multiplies t), then the bias vector (out). For the default
// 3 x 32 network on 2D data this gives 128 + 1088 + 1088 + 68 = 2372
// parameters.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bcnf/error.hpp"
#include "bcnf/rng.hpp"

namespace bcnf {

using ParamVector = std::vector<double>;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

struct NetConfig {
  std::size_t hidden_layers = 3;
  std::size_t hidden_width = 32;
  std::size_t input_dim = 2;

  void validate() const {
    require(hidden_layers >= 1, "net: hidden_layers must be >= 1");
    require(hidden_width >= 1, "net: hidden_width must be >= 1");
    require(input_dim >= 1, "net: input_dim must be >= 1");
  }
};

struct LayerShape {
  std::size_t in = 0;  // including the t input
  std::size_t out = 0;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

inline std::vector<LayerShape> layer_shapes(const NetConfig& cfg) {
  std::vector<LayerShape> shapes;
  std::size_t offset = 0;
  std::size_t fan_in = cfg.input_dim;
  for (std::size_t l = 0; l <= cfg.hidden_layers; ++l) {
    const bool output = l == cfg.hidden_layers;
    LayerShape s;
    s.in = fan_in + 1;
    s.out = output ? cfg.input_dim : cfg.hidden_width;
    s.weight_offset = offset;
    s.bias_offset = offset + s.in * s.out;
    offset = s.bias_offset + s.out;
    shapes.push_back(s);
    fan_in = s.out;
  }
  return shapes;
}

inline std::size_t param_count(const NetConfig& cfg) {
  const auto shapes = layer_shapes(cfg);
  return shapes.back().bias_offset + shapes.back().out;
}

/// Glorot-uniform weights, zero biases.
inline ParamVector init_params(const NetConfig& cfg, std::uint64_t seed) {
  ParamVector theta(param_count(cfg), 0.0);
  CounterRng rng(seed);
  for (const auto& s : layer_shapes(cfg)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
    for (std::size_t k = 0; k < s.in * s.out; ++k)
      theta[s.weight_offset + k] = bound * (2.0 * rng.uniform() - 1.0);
  }
  return theta;
}

namespace detail {

inline double elu(double z) { return z > 0.0 ? z : std::expm1(z); }
inline double elu_d1(double z) { return z > 0.0 ? 1.0 : std::exp(z); }
inline double elu_d2(double z) { return z > 0.0 ? 0.0 : std::exp(z); }

// Vectorized forms. exp(min(z, 0)) keeps the positive branch overflow-free.
inline Matrix elu_exp(const Matrix& z) { return z.array().min(0.0).exp().matrix(); }
inline Matrix elu(const Matrix& z, const Matrix& e) {
  return (z.array() > 0.0).select(z.array(), e.array() - 1.0).matrix();
}
inline Matrix elu_d1(const Matrix& z, const Matrix& e) {
  return (z.array() > 0.0).select(Matrix::Ones(z.rows(), z.cols()).array(), e.array()).matrix();
}
inline Matrix elu_d2(const Matrix& z, const Matrix& e) {
  return (z.array() > 0.0).select(Matrix::Zero(z.rows(), z.cols()).array(), e.array()).matrix();
}

}  // namespace detail

/// Gradients produced by a reverse pass.
struct Pullback {
  Matrix input;        // d x B, gradient wrt the points
  ParamVector params;  // accumulated over the batch
};

/// Batched evaluator. Points are columns of a d x B matrix; `t` holds one
/// time per column.
class VectorField {
 public:
  explicit VectorField(NetConfig cfg) : cfg_(cfg), shapes_(layer_shapes(cfg)) {
    cfg_.validate();
    n_params_ = param_count(cfg_);
  }

  const NetConfig& config() const noexcept { return cfg_; }
  std::size_t num_params() const noexcept { return n_params_; }
  std::size_t dim() const noexcept { return cfg_.input_dim; }

  /// Forward pass state kept for reverse-mode sweeps. With `tangents`
  /// enabled it also carries the input Jacobian applied to every basis
  /// direction (forward mode), which gives the exact trace.
  struct Tape {
    std::vector<Matrix> inputs;              // per layer, hidden part (no t row)
    std::vector<Matrix> pre;                 // per layer, pre-activation
    std::vector<std::vector<Matrix>> dpre;   // [direction][layer] tangent of pre
    std::vector<std::vector<Matrix>> dinputs;// [direction][layer] tangent of inputs
    RowVector t;
    bool tangents = false;

    const Matrix& output() const { return pre.back(); }
  };

  void check_size(std::span<const double> theta) const {
    require(theta.size() == n_params_, "net: parameter vector has length " +
                                           std::to_string(theta.size()) + ", expected " +
                                           std::to_string(n_params_));
  }

  Tape record(std::span<const double> theta, const Matrix& x, const RowVector& t,
              bool tangents) const {
    check_size(theta);
    const Eigen::Index batch = x.cols();
    const std::size_t n_layers = shapes_.size();
    Tape tape;
    tape.t = t;
    tape.tangents = tangents;
    tape.inputs.reserve(n_layers);
    tape.pre.reserve(n_layers);
    tape.inputs.push_back(x);
    const std::size_t d = cfg_.input_dim;
    if (tangents) {
      tape.dpre.resize(d);
      tape.dinputs.resize(d);
      for (std::size_t k = 0; k < d; ++k) {
        Matrix e = Matrix::Zero(static_cast<Eigen::Index>(d), batch);
        e.row(static_cast<Eigen::Index>(k)).setOnes();
        tape.dinputs[k].push_back(std::move(e));
      }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto& s = shapes_[l];
      const auto w = weights(theta, l);
      const auto b = bias(theta, l);
      const auto wh = w.leftCols(static_cast<Eigen::Index>(s.in - 1));
      Matrix z(static_cast<Eigen::Index>(s.out), batch);
      z.noalias() = wh * tape.inputs[l];
      z.noalias() += w.col(static_cast<Eigen::Index>(s.in - 1)) * t;
      z.colwise() += b;
      if (tangents) {
        for (std::size_t k = 0; k < d; ++k) {
          Matrix dz(static_cast<Eigen::Index>(s.out), batch);
          dz.noalias() = wh * tape.dinputs[k][l];
          tape.dpre[k].push_back(std::move(dz));
        }
      }
      const bool hidden = l + 1 < n_layers;
      if (hidden) {
        const Matrix e = detail::elu_exp(z);
        Matrix h = detail::elu(z, e);
        if (tangents) {
          const Matrix slope = detail::elu_d1(z, e);
          for (std::size_t k = 0; k < d; ++k)
            tape.dinputs[k].push_back(slope.cwiseProduct(tape.dpre[k][l]));
        }
        tape.inputs.push_back(std::move(h));
      }
      if (!z.allFinite())
        throw NumericalFault("net: non-finite activation in layer " + std::to_string(l), l);
      tape.pre.push_back(std::move(z));
    }
    return tape;
  }

  /// v_t(x) for every column.
  Matrix forward(std::span<const double> theta, const Matrix& x, const RowVector& t) const {
    return record(theta, x, t, false).output();
  }

  /// Same as forward() with a shared time for the whole batch.
  Matrix forward(std::span<const double> theta, const Matrix& x, double t) const {
    return forward(theta, x, RowVector::Constant(x.cols(), t));
  }

  /// tr(d v_t / d x) per column, from a tape recorded with tangents.
  static RowVector trace(const Tape& tape) {
    RowVector tr = RowVector::Zero(tape.t.size());
    for (std::size_t k = 0; k < tape.dpre.size(); ++k)
      tr += tape.dpre[k].back().row(static_cast<Eigen::Index>(k));
    return tr;
  }

  /// Reverse sweep for the scalar sum_b [ grad_v(:,b) . v(:,b) + grad_tr(b) * tr_b ].
  /// grad_tr is ignored (may be empty) for tapes recorded without tangents.
  /// Parameter gradients are added into `out.params` (resized if empty).
  void pullback(std::span<const double> theta, const Tape& tape, const Matrix& grad_v,
                const RowVector& grad_tr, Pullback& out) const {
    const std::size_t n_layers = shapes_.size();
    const std::size_t d = cfg_.input_dim;
    const Eigen::Index batch = grad_v.cols();
    const bool with_trace = tape.tangents && grad_tr.size() == batch;
    if (out.params.size() != n_params_) out.params.assign(n_params_, 0.0);

    Matrix gz = grad_v;
    std::vector<Matrix> gdz;
    if (with_trace) {
      gdz.resize(d);
      for (std::size_t k = 0; k < d; ++k) {
        gdz[k] = Matrix::Zero(static_cast<Eigen::Index>(d), batch);
        gdz[k].row(static_cast<Eigen::Index>(k)) = grad_tr;
      }
    }
    for (std::size_t l = n_layers; l-- > 0;) {
      const auto& s = shapes_[l];
      const auto hin = static_cast<Eigen::Index>(s.in - 1);
      auto gw = Eigen::Map<Matrix>(out.params.data() + s.weight_offset,
                                   static_cast<Eigen::Index>(s.out),
                                   static_cast<Eigen::Index>(s.in));
      auto gb = Eigen::Map<Vector>(out.params.data() + s.bias_offset,
                                   static_cast<Eigen::Index>(s.out));
      // Reduce into owned buffers so rounding does not depend on the
      // alignment of out.params.
      Matrix dw(static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in));
      dw.leftCols(hin).noalias() = gz * tape.inputs[l].transpose();
      if (with_trace)
        for (std::size_t k = 0; k < d; ++k)
          dw.leftCols(hin).noalias() += gdz[k] * tape.dinputs[k][l].transpose();
      dw.col(hin).noalias() = gz * tape.t.transpose();
      const Vector db = gz.rowwise().sum();
      gw += dw;
      gb += db;

      const auto wh = weights(theta, l).leftCols(hin);
      Matrix ga(hin, batch);
      ga.noalias() = wh.transpose() * gz;
      std::vector<Matrix> gda;
      if (with_trace) {
        gda.resize(d);
        for (std::size_t k = 0; k < d; ++k) {
          gda[k].resize(hin, batch);
          gda[k].noalias() = wh.transpose() * gdz[k];
        }
      }
      if (l == 0) {
        // Tangent inputs of the first layer are constant basis vectors.
        out.input = std::move(ga);
        break;
      }
      const Matrix& z = tape.pre[l - 1];
      const Matrix e = detail::elu_exp(z);
      const Matrix slope = detail::elu_d1(z, e);
      gz = slope.cwiseProduct(ga);
      if (with_trace) {
        const Matrix curvature = detail::elu_d2(z, e);
        Matrix mixed = Matrix::Zero(z.rows(), batch);
        for (std::size_t k = 0; k < d; ++k) {
          mixed += tape.dpre[k][l - 1].cwiseProduct(gda[k]);
          gdz[k] = slope.cwiseProduct(gda[k]);
        }
        gz += curvature.cwiseProduct(mixed);
      }
    }
  }

  // -- single-point conveniences ------------------------------------------

  Vector forward_point(std::span<const double> theta, const Vector& x, double t) const {
    return forward(theta, x, t).col(0);
  }

  /// d(upstream . v_t(x)) / d theta.
  ParamVector vjp_params(std::span<const double> theta, const Vector& x, double t,
                         const Vector& upstream) const {
    const Tape tape = record(theta, x, RowVector::Constant(1, t), false);
    Pullback pb;
    pullback(theta, tape, upstream, RowVector(), pb);
    return pb.params;
  }

  /// (d v_t / d x) * direction.
  Vector jvp_input(std::span<const double> theta, const Vector& x, double t,
                   const Vector& direction) const {
    const Tape tape = record(theta, x, RowVector::Constant(1, t), true);
    Vector out = Vector::Zero(static_cast<Eigen::Index>(dim()));
    for (std::size_t k = 0; k < dim(); ++k)
      out += direction(static_cast<Eigen::Index>(k)) * tape.dpre[k].back().col(0);
    return out;
  }

  double trace_point(std::span<const double> theta, const Vector& x, double t) const {
    return trace(record(theta, x, RowVector::Constant(1, t), true))(0);
  }

  /// d tr(d v_t / d x) / d theta (forward-over-reverse).
  ParamVector trace_grad_params(std::span<const double> theta, const Vector& x,
                                double t) const {
    const Tape tape = record(theta, x, RowVector::Constant(1, t), true);
    Pullback pb;
    pullback(theta, tape, Matrix::Zero(static_cast<Eigen::Index>(dim()), 1),
             RowVector::Ones(1), pb);
    return pb.params;
  }

  Eigen::Map<const Matrix> weights(std::span<const double> theta, std::size_t layer) const {
    const auto& s = shapes_[layer];
    return {theta.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
            static_cast<Eigen::Index>(s.in)};
  }

  Eigen::Map<const Vector> bias(std::span<const double> theta, std::size_t layer) const {
    const auto& s = shapes_[layer];
    return {theta.data() + s.bias_offset, static_cast<Eigen::Index>(s.out)};
  }

  const std::vector<LayerShape>& shapes() const noexcept { return shapes_; }

 private:
  NetConfig cfg_;
  std::vector<LayerShape> shapes_;
  std::size_t n_params_ = 0;
};

}  // namespace bcnf
