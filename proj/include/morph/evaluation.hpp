#pragma once

// Deterministic evaluation of a controller on the physical hardware model.

#include "morph/env.hpp"
#include "morph/policy.hpp"

#include <functional>
#include <vector>

namespace morph {

struct EvalStats {
  double goal_rate = 0.0;
  double mean_return = 0.0;
  /// Mean number of colliding steps per episode.
  double mean_collisions = 0.0;
  Index episodes = 0;
};

/// Maps the current state and its observation to a joint-delta action.
using Controller = std::function<Vector(const EnvState& state, const Vector& obs)>;

struct EpisodeOutcome {
  double total_return = 0.0;
  Index collision_steps = 0;
  bool reached_goal = false;
  EpisodeTrace trace;
};

/// One episode on the kinematic hardware of `design`.
EpisodeOutcome run_episode(const ReachTask& task, const DesignParams& design, const Controller& controller, Rng& rng);

EvalStats evaluate_controller(const ReachTask& task, const DesignParams& design, const Controller& controller,
                              Index n_episodes, Rng& rng, std::vector<EpisodeTrace>* traces = nullptr);

/// Mean-action rollouts of `policy` with the kinematic backend.
EvalStats evaluate_design(const PolicyNet& policy, const DesignParams& design, const ReachTask& task,
                          Index n_episodes, Rng& rng, std::vector<EpisodeTrace>* traces = nullptr);

}  // namespace morph
