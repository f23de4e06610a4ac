#pragma once

// Gaussian control policy with a value head, rollout collection, GAE, and
// the joint policy/proxy update with conflict projection.

#include "morph/diffcore.hpp"
#include "morph/env.hpp"
#include "morph/hwnn.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace morph {

struct PolicyConfig {
  std::vector<Index> actor_hidden{64, 64};
  std::vector<Index> critic_hidden{64, 64};
  double init_log_std = -3.0;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  /// Scale on the initial actor output layer.
  double actor_output_gain = 0.01;
};

struct PpoConfig {
  double clip = 0.2;
  int epochs = 4;
  Index minibatch = 256;
  double gamma = 0.99;
  double lambda = 0.95;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  bool normalize_advantages = true;
  /// Rewards are multiplied by this before they enter any loss.
  double reward_scale = 1.0;
  AdamConfig adam{3e-4, 0.9, 0.999, 1e-8};
};

/// Blocks: actor.W*/actor.b*, log_std (n x 1), critic.W*/critic.b*. The
/// action mean is a_max times the actor output.
struct PolicyNet {
  ParamVector params;
  MlpSpec actor;
  MlpSpec critic;
  Index arity = 0;
  double a_max = 0.1;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
};

PolicyNet make_policy(Index obs_dim, Index arity, double a_max, const PolicyConfig& config, Rng& rng);

Matrix mean_actions(const PolicyNet& policy, const Matrix& obs);
Vector mean_action(const PolicyNet& policy, const Vector& obs);
Vector values(const PolicyNet& policy, const Matrix& obs);
double value(const PolicyNet& policy, const Vector& obs);
Vector policy_log_std(const PolicyNet& policy);

/// Diagonal Gaussian log density.
double gaussian_log_prob(const Vector& mean, const Vector& log_std, const Vector& action);

struct ActionSample {
  Vector action;  // pre-clip
  double log_prob = 0.0;
};

ActionSample sample_action(const PolicyNet& policy, const Vector& obs, Rng& rng);

struct CombinedSample {
  Vector action;    // pre-clip sample
  Vec2 task_action = Vec2::Zero();
  double log_prob = 0.0;
};

/// Samples a from the policy and maps the clipped a through the proxy.
CombinedSample combined_step(const PolicyNet& policy, const ProxyNet& proxy, const ReachTask& task,
                             const EnvState& state, Rng& rng);

/// One column per environment step.
struct RolloutBatch {
  Matrix obs;          // obs_dim x N
  Matrix joints;       // n x N, state before the step
  Matrix ee;           // 2 x N
  Matrix actions;      // n x N, sampled (pre-clip)
  Matrix applied;      // n x N, clipped
  Matrix task_actions; // 2 x N
  Matrix next_joints;  // n x N
  /// The (joints, ee, applied action) pair the hardware model mapped to
  /// `ee`; after a reset it is the pose, its kinematic end-effector and a
  /// zero action.
  Matrix source_joints;   // n x N
  Matrix source_ee;       // 2 x N
  Matrix source_actions;  // n x N
  Vector rewards;
  Vector log_probs;
  Vector values;
  Vector next_values;  // critic at the next state
  Vector advantages;
  Vector returns;
  std::vector<std::uint8_t> terminal;     // goal reached: no bootstrap
  std::vector<std::uint8_t> episode_end;  // terminal, horizon or batch cut
  std::vector<double> episode_returns;    // raw returns of finished episodes
  Index collision_steps = 0;
  Index goals = 0;

  Index size() const { return rewards.size(); }
};

/// Resizes every per-step field to `steps` columns.
RolloutBatch make_rollout_batch(Index obs_dim, Index arity, Index steps);

/// Collects `steps` transitions from fresh resets. The end-effector comes
/// from `model`; collisions from `design`. A trailing partial episode is cut
/// and bootstrapped.
RolloutBatch collect_rollouts(const PolicyNet& policy, const HardwareModel& model, const ReachTask& task,
                              const DesignParams& design, Index steps, Rng& rng);

/// Fills advantages and returns by GAE over `rewards * reward_scale`.
/// Advantages are normalized when requested and N > 1; returns use the
/// unnormalized advantages.
void gae_advantages(RolloutBatch& batch, double gamma, double lambda, bool normalize = true,
                    double reward_scale = 1.0);

double cosine_similarity(const Vector& g1, const Vector& g2);
double cosine_similarity(const ParamVector& g1, const ParamVector& g2);

/// Removes the component of g_task along g_hw when the two conflict.
Vector project_if_conflicting(const Vector& g_task, const Vector& g_hw);
ParamVector project_if_conflicting(const ParamVector& g_task, const ParamVector& g_hw);

struct JointUpdateConfig {
  PpoConfig ppo;
  double alpha = 10.0;
  bool projection = true;
  /// Recompute the end-effector entries of the observations through the
  /// proxy so the surrogate and value loss also reach psi.
  bool observation_gradient = true;
  /// Add the one-step model return through the proxy output to the task
  /// loss.
  bool model_return = true;
  AdamConfig proxy_adam{1e-3, 0.9, 0.999, 1e-8};
};

/// Losses and per-parameter gradients of one minibatch.
struct JointLoss {
  double task_loss = 0.0;    // surrogate + value loss + model loss
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double model_loss = 0.0;
  double divergence = 0.0;   // D on the minibatch
  double hw_loss = 0.0;      // alpha * D
  ParamVector g_task_theta;
  ParamVector g_task_psi;
  ParamVector g_hw_psi;
  double max_ratio_deviation = 0.0;
};

/// Evaluates the joint objective on the columns `idx` of `batch`. The
/// critic inside the model return uses `value_snapshot`, a copy of the
/// policy parameters that receives no gradient. `proxy` may be null for
/// pure PPO, in which case the psi fields stay empty.
JointLoss evaluate_joint_loss(const PolicyNet& policy, const ParamVector& value_snapshot, const ProxyNet* proxy,
                              const HardwareModel* hwphy, const ReachTask& task, const RolloutBatch& batch,
                              const std::vector<Index>& idx, const JointUpdateConfig& config);

struct UpdateStats {
  std::vector<double> cosines;  // minibatches where both norms exceed 1e-12
  Index conflicts = 0;
  Index minibatches = 0;
  double mean_policy_loss = 0.0;
  double mean_value_loss = 0.0;
  double mean_model_loss = 0.0;
  double mean_divergence = 0.0;
  /// max |ratio - 1| over the first minibatch, before any parameter change.
  double first_ratio_deviation = 0.0;

  double negative_fraction() const;
};

/// PPO epochs over `batch` (advantages must be filled). theta follows the
/// task gradient; psi follows the task gradient through the proxy output
/// plus alpha times the divergence gradient, with projection of the task
/// part when they conflict. Throws NumericalError on a non-finite loss or
/// gradient before any parameter in that minibatch changes.
UpdateStats joint_update(PolicyNet& policy, AdamState& policy_adam, ProxyNet* proxy, AdamState* proxy_adam,
                         const HardwareModel* hwphy, const ReachTask& task, const RolloutBatch& batch,
                         const JointUpdateConfig& config, Rng& rng);

void clamp_log_std(PolicyNet& policy);

}  // namespace morph
