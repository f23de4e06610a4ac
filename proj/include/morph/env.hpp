#pragma once

// Planar reaching task in a zigzag tunnel: episode state machine, reward,
// observations, and episode traces. The hardware backend is pluggable.

#include "morph/diffcore.hpp"
#include "morph/hwphy.hpp"

#include <filesystem>
#include <string_view>
#include <vector>

namespace morph {

enum class CollisionMode { kBinary, kPenetration };

std::string_view to_string(CollisionMode m);
CollisionMode collision_mode_from_string(std::string_view s);

struct RewardConfig {
  double beta0 = 0.5;   // centerline deviation weight
  double beta1 = 1.0;   // collision weight
  double beta2 = 10.0;  // goal bonus
  CollisionMode collision_mode = CollisionMode::kBinary;
  /// Adds the distance and deviation terms instead of subtracting them.
  bool raw_sign = false;
};

struct EnvConfig {
  Index horizon = 200;
  double a_max = 0.1;
  double init_noise = 0.05;
  int collision_samples = 32;
  /// Positions enter observations divided by this.
  double obs_position_scale = 10.0;
};

struct ReachTask {
  TunnelGeometry tunnel;
  RewardConfig reward;
  EnvConfig env;
};

struct EnvState {
  Vector joints;
  Vec2 ee = Vec2::Zero();
  Index step_index = 0;
  bool done = false;
};

struct StepInfo {
  bool collision = false;
  double penetration = 0.0;
  double goal_distance = 0.0;
  double centerline_deviation = 0.0;
  bool goal_touched = false;
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

/// Straight pose along the tunnel entrance heading, each joint perturbed
/// uniformly by +/- init_noise. The end-effector comes from `model` at a
/// zero action.
EnvState reset(const ReachTask& task, const DesignParams& design, const HardwareModel& model, Rng& rng);

/// Applies the clipped action. Joints advance exactly; the end-effector is
/// whatever `model` reports. Collisions always use the chain geometry of
/// `design_for_collision`. Throws UsageError once the episode is done.
StepResult step(const ReachTask& task, const EnvState& state, const Vector& action, const HardwareModel& model,
                const DesignParams& design_for_collision);

double reward_fn(const Vec2& ee, const TunnelGeometry& tunnel, const CollisionResult& collision,
                 bool goal_touched, const RewardConfig& config);

Index observation_dim(Index arity);

/// [wrapped joints, sin and cos of cumulative angles, ee, goal - ee]; the
/// position entries are divided by the observation scale.
Vector observe(const ReachTask& task, const Vector& joints, const Vec2& ee);
Matrix observe_batch(const ReachTask& task, const Matrix& joints, const Matrix& ee);

/// Observation batch whose end-effector rows flow from `ee` (2 x B) on the
/// tape.
Tape::Var observe_on_tape(Tape& tape, const ReachTask& task, const Matrix& joints, Tape::Var ee);

/// Distance and centerline terms of the reward for a batch of
/// end-effector positions (1 x B). Collision and goal terms do not depend
/// on the end-effector continuously and are left out.
Tape::Var shaping_reward_on_tape(Tape& tape, const ReachTask& task, Tape::Var ee);

struct TraceRow {
  Index step = 0;
  Vector joints;
  Vec2 ee = Vec2::Zero();
  double reward = 0.0;
  bool collision = false;
  bool done = false;
};

struct EpisodeTrace {
  std::vector<TraceRow> rows;  // row 0 is the reset state
};

/// Columns: step, q0..q{n-1}, ee_x, ee_y, reward, collision, done.
void write_trace_csv(const std::filesystem::path& path, const EpisodeTrace& trace);

}  // namespace morph
