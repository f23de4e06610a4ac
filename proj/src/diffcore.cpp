#include "morph/diffcore.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace morph {

// ---------------------------------------------------------------------------
// ParamVector

ParamBlock ParamVector::add_block(std::string name, Index rows, Index cols) {
  if (rows < 1 || cols < 1) {
    throw ConfigError(fmt::format("parameter block '{}' has invalid shape {}x{}", name, rows, cols));
  }
  if (has_block(name)) throw ConfigError(fmt::format("duplicate parameter block '{}'", name));
  const Index offset = values_.size();
  Vector grown = Vector::Zero(offset + rows * cols);
  grown.head(offset) = values_;
  values_ = std::move(grown);
  layout_.push_back(ParamBlock{std::move(name), offset, rows, cols});
  return layout_.back();
}

const ParamBlock& ParamVector::block(std::string_view name) const {
  for (const auto& b : layout_) {
    if (b.name == name) return b;
  }
  throw ConfigError(fmt::format("no parameter block named '{}'", name));
}

bool ParamVector::has_block(std::string_view name) const {
  return std::any_of(layout_.begin(), layout_.end(), [&](const ParamBlock& b) { return b.name == name; });
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out;
  out.layout_ = layout_;
  out.values_ = Vector::Zero(values_.size());
  return out;
}

// ---------------------------------------------------------------------------
// Tape

Tape::Var Tape::push(Node n) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw UsageError("tape too large");
  if (consumed_) throw UsageError("tape already consumed by backward()");
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
  return nodes_[v.id];
}

void Tape::check_broadcast(const Matrix& lhs, const Matrix& rhs, const char* op) {
  const bool same = lhs.rows() == rhs.rows() && lhs.cols() == rhs.cols();
  const bool column = rhs.cols() == 1 && rhs.rows() == lhs.rows();
  const bool scalar = rhs.rows() == 1 && rhs.cols() == 1;
  if (!same && !column && !scalar) {
    throw ConfigError(fmt::format("{}: incompatible shapes {}x{} and {}x{}", op, lhs.rows(), lhs.cols(),
                                  rhs.rows(), rhs.cols()));
  }
}

// Reduces a full-shape contribution onto a (possibly broadcast) adjoint.
void Tape::accumulate_broadcast(Matrix& adj, const Matrix& contribution) {
  if (adj.rows() == contribution.rows() && adj.cols() == contribution.cols()) {
    adj += contribution;
  } else if (adj.cols() == 1 && adj.rows() == contribution.rows()) {
    adj += contribution.rowwise().sum();
  } else {
    adj(0, 0) += contribution.sum();
  }
}

namespace {

Matrix broadcast_to(const Matrix& rhs, Index rows, Index cols) {
  if (rhs.rows() == rows && rhs.cols() == cols) return rhs;
  if (rhs.cols() == 1 && rhs.rows() == rows) return rhs.replicate(1, cols);
  return Matrix::Constant(rows, cols, rhs(0, 0));
}

}  // namespace

Tape::Var Tape::constant(Matrix value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::Var Tape::parameter(const ParamVector& params, const ParamBlock& block) {
  if (block.offset + block.size() > params.size()) {
    throw ConfigError(fmt::format("block '{}' lies outside its parameter vector", block.name));
  }
  std::uint32_t source = 0;
  auto it = std::find_if(sources_.begin(), sources_.end(), [&](const Source& s) { return s.params == &params; });
  if (it == sources_.end()) {
    sources_.push_back(Source{&params, Vector::Zero(params.size())});
    source = static_cast<std::uint32_t>(sources_.size() - 1);
  } else {
    source = static_cast<std::uint32_t>(it - sources_.begin());
  }
  Node n;
  n.op = Op::kParameter;
  n.value = params.matrix(block);
  n.source = source;
  n.offset = block.offset;
  n.needs_grad = true;
  return push(std::move(n));
}

Tape::Var Tape::matmul(Var lhs, Var rhs) {
  const Node& a = node(lhs);
  const Node& b = node(rhs);
  if (a.value.cols() != b.value.rows()) {
    throw ConfigError(fmt::format("matmul: incompatible shapes {}x{} and {}x{}", a.value.rows(), a.value.cols(),
                                  b.value.rows(), b.value.cols()));
  }
  Node n;
  n.op = Op::kMatmul;
  n.value = a.value * b.value;
  n.lhs = lhs.id;
  n.rhs = rhs.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::add(Var lhs, Var rhs) {
  const Node& a = node(lhs);
  const Node& b = node(rhs);
  check_broadcast(a.value, b.value, "add");
  Node n;
  n.op = Op::kAdd;
  n.value = a.value + broadcast_to(b.value, a.value.rows(), a.value.cols());
  n.lhs = lhs.id;
  n.rhs = rhs.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::sub(Var lhs, Var rhs) {
  const Node& a = node(lhs);
  const Node& b = node(rhs);
  check_broadcast(a.value, b.value, "sub");
  Node n;
  n.op = Op::kSub;
  n.value = a.value - broadcast_to(b.value, a.value.rows(), a.value.cols());
  n.lhs = lhs.id;
  n.rhs = rhs.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::mul(Var lhs, Var rhs) {
  const Node& a = node(lhs);
  const Node& b = node(rhs);
  check_broadcast(a.value, b.value, "mul");
  Node n;
  n.op = Op::kMul;
  n.value = a.value.cwiseProduct(broadcast_to(b.value, a.value.rows(), a.value.cols()));
  n.lhs = lhs.id;
  n.rhs = rhs.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::scale(Var x, double factor) {
  const Node& a = node(x);
  Node n;
  n.op = Op::kScale;
  n.value = a.value * factor;
  n.lhs = x.id;
  n.c0 = factor;
  n.needs_grad = a.needs_grad;
  return push(std::move(n));
}

#define MORPH_UNARY(method, opcode, expr)   \
  Tape::Var Tape::method(Var x) {           \
    const Node& a = node(x);                \
    Node n;                                 \
    n.op = Op::opcode;                      \
    n.value = a.value.array().expr.matrix(); \
    n.lhs = x.id;                           \
    n.needs_grad = a.needs_grad;            \
    return push(std::move(n));              \
  }

MORPH_UNARY(tanh, kTanh, tanh())
MORPH_UNARY(exp, kExp, exp())
MORPH_UNARY(log, kLog, log())
MORPH_UNARY(square, kSquare, square())
MORPH_UNARY(sqrt, kSqrt, sqrt())
MORPH_UNARY(abs, kAbs, abs())

#undef MORPH_UNARY

Tape::Var Tape::clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lower bound above upper bound");
  const Node& a = node(x);
  Node n;
  n.op = Op::kClamp;
  n.value = a.value.cwiseMax(lo).cwiseMin(hi);
  n.lhs = x.id;
  n.c0 = lo;
  n.c1 = hi;
  n.needs_grad = a.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::minimum(Var lhs, Var rhs) {
  const Node& a = node(lhs);
  const Node& b = node(rhs);
  if (a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
    throw ConfigError("minimum: operands must have identical shapes");
  }
  Node n;
  n.op = Op::kMinimum;
  n.value = a.value.cwiseMin(b.value);
  n.lhs = lhs.id;
  n.rhs = rhs.id;
  n.needs_grad = a.needs_grad || b.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::sum(Var x) {
  const Node& a = node(x);
  Node n;
  n.op = Op::kSum;
  n.value = Matrix::Constant(1, 1, a.value.sum());
  n.lhs = x.id;
  n.needs_grad = a.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::mean(Var x) {
  const Node& a = node(x);
  if (a.value.size() == 0) throw UsageError("mean of an empty node");
  Node n;
  n.op = Op::kMean;
  n.value = Matrix::Constant(1, 1, a.value.mean());
  n.lhs = x.id;
  n.needs_grad = a.needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::colwise_sum(Var x) {
  const Node& a = node(x);
  Node n;
  n.op = Op::kColwiseSum;
  n.value = a.value.colwise().sum();
  n.lhs = x.id;
  n.needs_grad = a.needs_grad;
  return push(std::move(n));
}

void Tape::backward(Var scalar_output) {
  const Node& out = node(scalar_output);
  if (out.value.size() != 1) throw UsageError("scalar backward() on a non-scalar node");
  backward(scalar_output, Matrix::Ones(1, 1));
}

void Tape::backward(Var output, const Matrix& seed) {
  if (consumed_) throw UsageError("tape already consumed by backward()");
  const Node& out = node(output);
  if (seed.rows() != out.value.rows() || seed.cols() != out.value.cols()) {
    throw ConfigError(fmt::format("backward: seed is {}x{} but output is {}x{}", seed.rows(), seed.cols(),
                                  out.value.rows(), out.value.cols()));
  }
  consumed_ = true;

  std::vector<Matrix> adj(output.id + 1);
  adj[output.id] = seed;
  auto grad_of = [&](std::uint32_t id) -> Matrix* {
    if (!nodes_[id].needs_grad) return nullptr;
    Matrix& a = adj[id];
    if (a.size() == 0) a = Matrix::Zero(nodes_[id].value.rows(), nodes_[id].value.cols());
    return &a;
  };

  for (std::int64_t i = output.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    Matrix& g = adj[static_cast<std::size_t>(i)];
    if (g.size() == 0 || !n.needs_grad) continue;
    switch (n.op) {
      case Op::kConstant:
        break;
      case Op::kParameter: {
        Source& s = sources_[n.source];
        s.grad.segment(n.offset, g.size()) += Eigen::Map<const Vector>(g.data(), g.size());
        break;
      }
      case Op::kMatmul: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        if (Matrix* da = grad_of(n.lhs)) da->noalias() += g * b.transpose();
        if (Matrix* db = grad_of(n.rhs)) db->noalias() += a.transpose() * g;
        break;
      }
      case Op::kAdd: {
        if (Matrix* da = grad_of(n.lhs)) *da += g;
        if (Matrix* db = grad_of(n.rhs)) accumulate_broadcast(*db, g);
        break;
      }
      case Op::kSub: {
        if (Matrix* da = grad_of(n.lhs)) *da += g;
        if (Matrix* db = grad_of(n.rhs)) accumulate_broadcast(*db, -g);
        break;
      }
      case Op::kMul: {
        const Matrix& a = nodes_[n.lhs].value;
        const Matrix& b = nodes_[n.rhs].value;
        if (Matrix* da = grad_of(n.lhs)) *da += g.cwiseProduct(broadcast_to(b, a.rows(), a.cols()));
        if (Matrix* db = grad_of(n.rhs)) accumulate_broadcast(*db, g.cwiseProduct(a));
        break;
      }
      case Op::kScale:
        if (Matrix* da = grad_of(n.lhs)) *da += n.c0 * g;
        break;
      case Op::kTanh:
        if (Matrix* da = grad_of(n.lhs)) *da += (g.array() * (1.0 - n.value.array().square())).matrix();
        break;
      case Op::kExp:
        if (Matrix* da = grad_of(n.lhs)) *da += g.cwiseProduct(n.value);
        break;
      case Op::kLog:
        if (Matrix* da = grad_of(n.lhs)) *da += g.cwiseQuotient(nodes_[n.lhs].value);
        break;
      case Op::kSquare:
        if (Matrix* da = grad_of(n.lhs)) *da += 2.0 * g.cwiseProduct(nodes_[n.lhs].value);
        break;
      case Op::kSqrt:
        if (Matrix* da = grad_of(n.lhs)) *da += (0.5 * g.array() / n.value.array()).matrix();
        break;
      case Op::kAbs:
        if (Matrix* da = grad_of(n.lhs)) *da += g.cwiseProduct(nodes_[n.lhs].value.cwiseSign());
        break;
      case Op::kClamp:
        if (Matrix* da = grad_of(n.lhs)) {
          const auto& x = nodes_[n.lhs].value.array();
          *da += ((x >= n.c0) && (x <= n.c1)).select(g.array(), 0.0).matrix();
        }
        break;
      case Op::kMinimum: {
        const auto& a = nodes_[n.lhs].value.array();
        const auto& b = nodes_[n.rhs].value.array();
        if (Matrix* da = grad_of(n.lhs)) *da += (a <= b).select(g.array(), 0.0).matrix();
        if (Matrix* db = grad_of(n.rhs)) *db += (a <= b).select(0.0, g.array()).matrix();
        break;
      }
      case Op::kSum:
        if (Matrix* da = grad_of(n.lhs)) da->array() += g(0, 0);
        break;
      case Op::kMean:
        if (Matrix* da = grad_of(n.lhs)) da->array() += g(0, 0) / static_cast<double>(da->size());
        break;
      case Op::kColwiseSum:
        if (Matrix* da = grad_of(n.lhs)) da->rowwise() += g.row(0);
        break;
    }
    g.resize(0, 0);
  }
}

ParamVector Tape::gradient(const ParamVector& params) const {
  if (!consumed_) throw UsageError("gradient() requested before backward()");
  ParamVector out = params.zeros_like();
  for (const auto& s : sources_) {
    if (s.params == &params) out.values() = s.grad;
  }
  return out;
}

// ---------------------------------------------------------------------------
// MLP

Index MlpSpec::parameter_count() const {
  Index total = 0;
  for (Index l = 0; l < layer_count(); ++l) total += widths[l + 1] * widths[l] + widths[l + 1];
  return total;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw ConfigError("MLP needs at least an input and an output width");
  for (Index w : widths) {
    if (w < 1) throw ConfigError(fmt::format("MLP width {} is not positive", w));
  }
}

namespace {

std::string weight_name(std::string_view prefix, Index layer) { return fmt::format("{}W{}", prefix, layer); }
std::string bias_name(std::string_view prefix, Index layer) { return fmt::format("{}b{}", prefix, layer); }

}  // namespace

void append_mlp_blocks(ParamVector& params, const MlpSpec& spec, std::string_view prefix) {
  spec.validate();
  for (Index l = 0; l < spec.layer_count(); ++l) {
    params.add_block(weight_name(prefix, l), spec.widths[l + 1], spec.widths[l]);
    params.add_block(bias_name(prefix, l), spec.widths[l + 1], 1);
  }
}

void init_mlp_params(ParamVector& params, const MlpSpec& spec, std::string_view prefix, Rng& rng,
                     double output_gain) {
  for (Index l = 0; l < spec.layer_count(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.widths[l]));
    const double gain = (l + 1 == spec.layer_count()) ? output_gain : 1.0;
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto w = params.matrix(weight_name(prefix, l));
    for (Index j = 0; j < w.cols(); ++j) {
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = gain * dist(rng);
    }
    params.matrix(bias_name(prefix, l)).setZero();
  }
}

Tape::Var mlp_forward(Tape& tape, const ParamVector& params, const MlpSpec& spec, std::string_view prefix,
                      Tape::Var input, ParamMode mode) {
  if (tape.value(input).rows() != spec.input_dim()) {
    throw ConfigError(fmt::format("MLP input has {} rows, expected {}", tape.value(input).rows(), spec.input_dim()));
  }
  auto leaf = [&](const ParamBlock& b) {
    return mode == ParamMode::kTrainable ? tape.parameter(params, b) : tape.constant(params.matrix(b));
  };
  Tape::Var h = input;
  for (Index l = 0; l < spec.layer_count(); ++l) {
    h = tape.matmul(leaf(params.block(weight_name(prefix, l))), h);
    h = tape.add(h, leaf(params.block(bias_name(prefix, l))));
    if (l + 1 < spec.layer_count()) h = tape.tanh(h);
  }
  return h;
}

Matrix mlp_eval(const ParamVector& params, const MlpSpec& spec, std::string_view prefix, const Matrix& input) {
  if (input.rows() != spec.input_dim()) {
    throw ConfigError(fmt::format("MLP input has {} rows, expected {}", input.rows(), spec.input_dim()));
  }
  Matrix h = input;
  for (Index l = 0; l < spec.layer_count(); ++l) {
    Matrix next = params.matrix(weight_name(prefix, l)) * h;
    next.colwise() += params.matrix(bias_name(prefix, l)).col(0);
    if (l + 1 < spec.layer_count()) next = next.array().tanh().matrix();
    h = std::move(next);
  }
  return h;
}

MlpForward mlp_forward(const ParamVector& params, const MlpSpec& spec, const Vector& input) {
  spec.validate();
  if (params.size() != spec.parameter_count()) {
    throw ConfigError(fmt::format("MLP expects {} parameters, got {}", spec.parameter_count(), params.size()));
  }
  if (input.size() != spec.input_dim()) {
    throw ConfigError(fmt::format("MLP input has length {}, expected {}", input.size(), spec.input_dim()));
  }
  MlpForward fwd;
  Tape::Var in = fwd.tape.constant(input);
  fwd.out = mlp_forward(fwd.tape, params, spec, "", in);
  fwd.output = fwd.tape.value(fwd.out).col(0);
  return fwd;
}

ParamVector backward(MlpForward& forward, const ParamVector& params, const Vector& seed) {
  if (seed.size() != forward.output.size()) {
    throw ConfigError(fmt::format("seed has length {}, output has length {}", seed.size(), forward.output.size()));
  }
  forward.tape.backward(forward.out, seed);
  return forward.tape.gradient(params);
}

// ---------------------------------------------------------------------------
// Adam

AdamState make_adam_state(const ParamVector& params) {
  return AdamState{Vector::Zero(params.size()), Vector::Zero(params.size()), 0};
}

void adam_step(ParamVector& params, const ParamVector& grad, AdamState& state, const AdamConfig& config) {
  if (grad.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ConfigError(fmt::format("adam_step: sizes differ (params {}, grad {}, moments {})", params.size(),
                                  grad.size(), state.first_moment.size()));
  }
  if (!grad.all_finite()) {
    Index bad = 0;
    for (Index i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(grad.values()[i])) ++bad;
    }
    throw NumericalError(fmt::format("adam_step: {} non-finite gradient entries, step skipped", bad));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  state.first_moment = config.beta1 * state.first_moment + (1.0 - config.beta1) * grad.values();
  state.second_moment =
      config.beta2 * state.second_moment + (1.0 - config.beta2) * grad.values().cwiseAbs2();
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  params.values().array() -= config.learning_rate * (state.first_moment.array() / c1) /
                             ((state.second_moment.array() / c2).sqrt() + config.epsilon);
}

}  // namespace morph
