#pragma once

// Reverse-mode differentiation over dense matrices, sized for the small
// multilayer perceptrons used by the policy and the hardware proxy.
//
// Values are column-batched: a node of shape (features x batch) carries one
// sample per column. Binary elementwise ops broadcast a column vector or a
// 1x1 scalar on the right-hand side; nothing else broadcasts.

#include "morph/common.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace morph {

struct ParamBlock {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
  bool operator==(const ParamBlock&) const = default;
};

/// Flat parameter storage with a named block layout. Blocks are stored
/// column-major and partition [0, size()) in insertion order.
class ParamVector {
 public:
  ParamVector() = default;

  /// Appends a zero-filled block and returns a copy of its descriptor.
  ParamBlock add_block(std::string name, Index rows, Index cols);

  const ParamBlock& block(std::string_view name) const;
  bool has_block(std::string_view name) const;
  const std::vector<ParamBlock>& layout() const { return layout_; }

  Eigen::Map<const Matrix> matrix(const ParamBlock& b) const {
    return {values_.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<Matrix> matrix(const ParamBlock& b) {
    return {values_.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<const Matrix> matrix(std::string_view name) const { return matrix(block(name)); }
  Eigen::Map<Matrix> matrix(std::string_view name) { return matrix(block(name)); }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Index size() const { return values_.size(); }

  ParamVector zeros_like() const;
  bool same_layout(const ParamVector& other) const { return layout_ == other.layout_; }
  bool all_finite() const { return values_.allFinite(); }

 private:
  Vector values_;
  std::vector<ParamBlock> layout_;
};

/// Single-use record of a forward computation. Nodes are appended in
/// topological order; backward() walks them once in reverse.
class Tape {
 public:
  struct Var {
    std::uint32_t id = 0;
  };

  Tape() = default;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Trainable leaf: gradient accumulates into the block of `params`.
  Var parameter(const ParamVector& params, const ParamBlock& block);

  Var matmul(Var lhs, Var rhs);
  Var add(Var lhs, Var rhs);
  Var sub(Var lhs, Var rhs);
  Var mul(Var lhs, Var rhs);
  Var scale(Var x, double factor);
  Var tanh(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var square(Var x);
  Var sqrt(Var x);
  Var abs(Var x);
  /// Elementwise clamp; zero gradient where the bound is active.
  Var clamp(Var x, double lo, double hi);
  /// Elementwise minimum; ties route the gradient to the left operand.
  Var minimum(Var lhs, Var rhs);
  /// Sum of every entry, shape 1x1.
  Var sum(Var x);
  /// Mean of every entry, shape 1x1.
  Var mean(Var x);
  /// Column sums, shape 1 x cols.
  Var colwise_sum(Var x);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Propagates `seed` (same shape as `output`) back through the tape.
  void backward(Var output, const Matrix& seed);
  /// Scalar convenience: seed of 1 on a 1x1 output.
  void backward(Var scalar_output);

  /// Gradient with the layout of `params`; zeros when it never entered
  /// the tape. Valid only after backward().
  ParamVector gradient(const ParamVector& params) const;

 private:
  enum class Op : std::uint8_t {
    kConstant, kParameter, kMatmul, kAdd, kSub, kMul, kScale, kTanh, kExp,
    kLog, kSquare, kSqrt, kAbs, kClamp, kMinimum, kSum, kMean, kColwiseSum
  };

  struct Node {
    Op op = Op::kConstant;
    Matrix value;
    std::uint32_t lhs = 0;
    std::uint32_t rhs = 0;
    double c0 = 0.0;
    double c1 = 0.0;
    std::uint32_t source = 0;  // parameter nodes only
    Index offset = 0;          // parameter nodes only
    bool needs_grad = false;
  };

  struct Source {
    const ParamVector* params = nullptr;
    Vector grad;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  static void check_broadcast(const Matrix& lhs, const Matrix& rhs, const char* op);
  static void accumulate_broadcast(Matrix& adj, const Matrix& contribution);

  std::vector<Node> nodes_;
  std::vector<Source> sources_;
  bool consumed_ = false;
};

/// Layer widths including input and output; tanh on hidden layers and
/// identity on the output.
struct MlpSpec {
  std::vector<Index> widths;

  Index input_dim() const { return widths.front(); }
  Index output_dim() const { return widths.back(); }
  Index layer_count() const { return static_cast<Index>(widths.size()) - 1; }
  Index parameter_count() const;
  void validate() const;
};

/// Adds blocks `<prefix>W<i>` (out x in) and `<prefix>b<i>` (out x 1).
void append_mlp_blocks(ParamVector& params, const MlpSpec& spec, std::string_view prefix = "");

/// Scaled-uniform initialisation of the blocks added by append_mlp_blocks;
/// the output layer is further scaled by `output_gain`, biases start at 0.
void init_mlp_params(ParamVector& params, const MlpSpec& spec, std::string_view prefix, Rng& rng,
                     double output_gain = 1.0);

enum class ParamMode { kTrainable, kFrozen };

/// Records an MLP evaluation on `tape`. `input` has spec.input_dim() rows.
Tape::Var mlp_forward(Tape& tape, const ParamVector& params, const MlpSpec& spec, std::string_view prefix,
                      Tape::Var input, ParamMode mode = ParamMode::kTrainable);

/// Tape-free evaluation for rollouts and evaluation.
Matrix mlp_eval(const ParamVector& params, const MlpSpec& spec, std::string_view prefix, const Matrix& input);

struct MlpForward {
  Vector output;
  Tape tape;
  Tape::Var out;
};

/// Single-sample forward pass on a fresh tape; `params` must hold exactly
/// the blocks of `spec` with an empty prefix.
MlpForward mlp_forward(const ParamVector& params, const MlpSpec& spec, const Vector& input);

/// Gradient of seed . output with respect to params.
ParamVector backward(MlpForward& forward, const ParamVector& params, const Vector& seed);

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Vector first_moment;
  Vector second_moment;
  std::int64_t step = 0;
};

AdamState make_adam_state(const ParamVector& params);

/// One Adam update. Throws NumericalError without touching `params` or
/// `state` when `grad` has a non-finite entry.
void adam_step(ParamVector& params, const ParamVector& grad, AdamState& state, const AdamConfig& config);

}  // namespace morph
