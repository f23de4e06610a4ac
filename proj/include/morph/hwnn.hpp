#pragma once

// Neural hardware proxy: a deterministic MLP surrogate for the kinematic
// hardware, and the sampled squared-distance divergence between the two.

#include "morph/diffcore.hpp"
#include "morph/hwphy.hpp"

#include <optional>
#include <string_view>
#include <vector>

namespace morph {

enum class ProxyFeatures {
  /// Raw joints, action deltas, sin/cos of the post-action cumulative
  /// angles and the current end-effector position.
  kEngineered,
  /// Raw joints, current end-effector position and action deltas.
  kRaw,
};

std::string_view to_string(ProxyFeatures f);
ProxyFeatures proxy_features_from_string(std::string_view s);

struct ProxyConfig {
  std::vector<Index> hidden{128, 128};
  ProxyFeatures features = ProxyFeatures::kEngineered;
  /// Positions enter the network divided by this.
  double position_scale = 10.0;
  /// Network output is multiplied by this to give world units.
  double output_scale = 10.0;
  /// Adds a trainable linear map from the input features straight to the
  /// output, alongside the MLP.
  bool linear_skip = true;
  AdamConfig adam{1e-2, 0.9, 0.999, 1e-8};
  Index pretrain_samples = 10000;
  Index pretrain_max_steps = 5000;
  double pretrain_target = 1e-3;
  Index pretrain_minibatch = 256;
};

struct ProxyNet {
  ParamVector params;
  MlpSpec spec;
  ProxyFeatures features = ProxyFeatures::kEngineered;
  double position_scale = 10.0;
  double output_scale = 10.0;
  bool linear_skip = false;
  Index arity = 0;
};

Index proxy_input_dim(Index arity, ProxyFeatures features);

/// Randomly initialised proxy for an `arity`-joint chain.
ProxyNet make_proxy(Index arity, const ProxyConfig& config, Rng& rng);

/// World-space outputs (2 x B) for precomputed input features.
Matrix proxy_eval_features(const ProxyNet& proxy, const Matrix& features);
Tape::Var proxy_forward_features(Tape& tape, const ProxyNet& proxy, Tape::Var features,
                                 ParamMode mode = ParamMode::kTrainable);

/// (s, a) pairs stored column-wise; `actions` are the applied (clipped)
/// joint deltas.
struct StateActionBatch {
  Matrix joints;   // n x B
  Matrix ee;       // 2 x B
  Matrix actions;  // n x B

  Index size() const { return joints.cols(); }
};

/// Network inputs for a batch, one column per pair.
Matrix proxy_inputs(const ProxyNet& proxy, const StateActionBatch& batch);

Vec2 proxy_apply(const ProxyNet& proxy, const Vector& joints, const Vec2& ee, const Vector& action);
Matrix proxy_apply(const ProxyNet& proxy, const StateActionBatch& batch);

/// Records the proxy on `tape`; returns the 2 x B task-action node.
Tape::Var proxy_forward(Tape& tape, const ProxyNet& proxy, const StateActionBatch& batch);

class ProxyHardware final : public HardwareModel {
 public:
  ProxyHardware(const ProxyNet& proxy, double a_max) : proxy_(&proxy), a_max_(a_max) {}
  Vec2 apply(const Vector& joints, const Vec2& ee, const Vector& action) const override;
  std::string_view name() const override { return "hwnn"; }

 private:
  const ProxyNet* proxy_;
  double a_max_;
};

/// Task actions of `model` for every pair in the batch (2 x B).
Matrix hardware_targets(const HardwareModel& model, const StateActionBatch& batch);

/// Mean over the batch of the squared distance between the proxy output
/// and `targets`. Throws UsageError on an empty batch.
Tape::Var divergence_on_tape(Tape& tape, Tape::Var proxy_out, const Matrix& targets);

double divergence_estimate(const HardwareModel& hwphy, const ProxyNet& proxy, const StateActionBatch& batch);

struct DivergenceGradient {
  double value = 0.0;
  ParamVector gradient;  // d value / d psi
};

/// Divergence and its gradient with respect to the proxy weights; the
/// physical model enters only through constant targets.
DivergenceGradient divergence_with_gradient(const HardwareModel& hwphy, const ProxyNet& proxy,
                                            const StateActionBatch& batch);

/// Uniform random pairs: joints in (-pi, pi], actions in [-a_max, a_max],
/// end-effector consistent with `design`.
StateActionBatch random_state_actions(const DesignParams& design, double a_max, Index count, Rng& rng);

struct RegressionReport {
  Index steps = 0;
  double final_divergence = 0.0;  // on the full training set
  bool reached_target = false;
};

/// Fits the proxy to `hwphy` on a fixed set of pairs with minibatch Adam
/// until the full-set divergence falls below `target` or `max_steps` runs
/// out. The full set is re-evaluated every `check_every` steps.
RegressionReport regress_proxy(ProxyNet& proxy, AdamState& adam, const HardwareModel& hwphy,
                               const StateActionBatch& data, const AdamConfig& adam_config, Index max_steps,
                               double target, Index minibatch, Rng& rng, Index check_every = 100);

StateActionBatch select_columns(const StateActionBatch& batch, const std::vector<Index>& columns);

}  // namespace morph
