#pragma once

// Run configuration: every tunable of a training run, loaded from and
// written to an INI document with sections [env], [reward], [policy],
// [proxy], [design_search] and [trainer].

#include "morph/designsearch.hpp"
#include "morph/env.hpp"
#include "morph/hwnn.hpp"
#include "morph/policy.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace morph {

struct TunnelConfig {
  int segments = 3;
  double segment_length = 4.0;
  double slope_deg = 35.0;
  double halfwidth = 0.75;
  double goal_radius = 0.25;
};

struct TrainerConfig {
  Index links = 5;
  double initial_link_length = 3.0;
  TunnelConfig tunnel;
  EnvConfig env;
  RewardConfig reward;
  PolicyConfig policy;
  PpoConfig ppo;
  ProxyConfig proxy;
  /// Proxy optimizer during co-training.
  AdamConfig proxy_train_adam{1e-3, 0.9, 0.999, 1e-8};
  DesignBounds bounds;
  DesignSearchConfig design_search;

  Index total_env_steps = 2000000;
  Index rollout_size = 4096;
  double alpha = 10.0;
  /// Divergence weight reached at the end of the step budget, moving
  /// log-linearly from alpha (linearly if either is zero) once the
  /// alpha_ramp_start fraction of the budget is spent. Negative keeps alpha
  /// constant.
  double alpha_final = -1.0;
  double alpha_ramp_start = 0.0;
  /// Policy updates between design searches; 0 disables design search.
  Index design_interval = 10;
  bool gradient_projection = true;
  bool observation_gradient = true;
  bool model_return = true;
  std::uint64_t seed = 0;
  /// Constraint threshold; recorded for reference, not used by the loop.
  double epsilon = 1e-3;
  Index convergence_window = 50;
  double convergence_tolerance = 1e-3;
  /// Updates between checkpoints; 0 writes only the final one.
  Index checkpoint_interval = 10;
  Index eval_episodes = 10;

  /// Env steps of fresh PPO per candidate in the CMA-ES-with-RL baseline.
  Index cmaes_inner_steps = 20480;
  Index cmaes_generations = 4;
  Index cmaes_population = 0;
};

TrainerConfig parse_config(std::string_view text, std::string_view source = "<config>");
TrainerConfig load_config(const std::filesystem::path& path);

/// Every key with its current value and a one-line description.
std::string serialize_config(const TrainerConfig& config);

/// Range and consistency checks; throws ConfigError naming the key.
void validate_config(const TrainerConfig& config);

ReachTask make_task(const TrainerConfig& config);
DesignParams initial_design(const TrainerConfig& config);
JointUpdateConfig joint_update_config(const TrainerConfig& config);
/// Divergence weight for an update that starts after `env_steps` steps.
double scheduled_alpha(const TrainerConfig& config, Index env_steps);

}  // namespace morph
