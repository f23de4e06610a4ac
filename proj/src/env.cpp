#include "morph/env.hpp"

#include <fmt/format.h>
#include <fmt/os.h>

#include <cmath>

namespace morph {

std::string_view to_string(CollisionMode m) { return m == CollisionMode::kBinary ? "binary" : "penetration"; }

CollisionMode collision_mode_from_string(std::string_view s) {
  if (s == "binary") return CollisionMode::kBinary;
  if (s == "penetration") return CollisionMode::kPenetration;
  throw ConfigError(fmt::format("unknown collision mode '{}' (expected binary or penetration)", s));
}

EnvState reset(const ReachTask& task, const DesignParams& design, const HardwareModel& model, Rng& rng) {
  const Index n = design.arity();
  std::uniform_real_distribution<double> noise(-task.env.init_noise, task.env.init_noise);
  EnvState s;
  s.joints = Vector::Zero(n);
  s.joints[0] = task.tunnel.entrance_heading();
  if (task.env.init_noise > 0.0) {
    for (Index k = 0; k < n; ++k) s.joints[k] += noise(rng);
  }
  for (Index k = 0; k < n; ++k) s.joints[k] = wrap_angle(s.joints[k]);
  s.ee = end_effector(design, s.joints);
  s.ee = model.apply(s.joints, s.ee, Vector::Zero(n));
  return s;
}

double reward_fn(const Vec2& ee, const TunnelGeometry& tunnel, const CollisionResult& collision,
                 bool goal_touched, const RewardConfig& config) {
  const double distance = (ee - tunnel.goal()).norm();
  const double deviation = std::abs(ee.y() - tunnel_centerline_y(tunnel, ee.x()));
  const double collide =
      config.collision_mode == CollisionMode::kBinary ? (collision.colliding ? 1.0 : 0.0) : collision.max_penetration;
  const double sign = config.raw_sign ? 1.0 : -1.0;
  return sign * (distance + config.beta0 * deviation) - config.beta1 * collide +
         config.beta2 * (goal_touched ? 1.0 : 0.0);
}

StepResult step(const ReachTask& task, const EnvState& state, const Vector& action, const HardwareModel& model,
                const DesignParams& design_for_collision) {
  if (state.done || state.step_index >= task.env.horizon) {
    throw UsageError("step() called on a finished episode");
  }
  if (action.size() != state.joints.size()) {
    throw ConfigError(fmt::format("action has {} entries, chain has {} joints", action.size(), state.joints.size()));
  }
  const Vector applied = clip_action(action, task.env.a_max);
  StepResult r;
  r.next.joints = state.joints + applied;
  for (Index k = 0; k < r.next.joints.size(); ++k) r.next.joints[k] = wrap_angle(r.next.joints[k]);
  r.next.ee = model.apply(state.joints, state.ee, applied);
  r.next.step_index = state.step_index + 1;

  const CollisionResult collision =
      collision_check(design_for_collision, r.next.joints, task.tunnel, task.env.collision_samples);
  r.info.collision = collision.colliding;
  r.info.penetration = collision.max_penetration;
  r.info.goal_distance = (r.next.ee - task.tunnel.goal()).norm();
  r.info.centerline_deviation = std::abs(r.next.ee.y() - tunnel_centerline_y(task.tunnel, r.next.ee.x()));
  r.info.goal_touched = r.info.goal_distance <= task.tunnel.goal_radius();
  r.reward = reward_fn(r.next.ee, task.tunnel, collision, r.info.goal_touched, task.reward);
  r.done = r.info.goal_touched || r.next.step_index >= task.env.horizon;
  r.next.done = r.done;
  return r;
}

Index observation_dim(Index arity) { return 3 * arity + 4; }

namespace {

void fill_joint_features(const Vector& joints, Eigen::Ref<Vector> out) {
  const Index n = joints.size();
  double heading = 0.0;
  for (Index k = 0; k < n; ++k) {
    heading += joints[k];
    out[k] = wrap_angle(joints[k]);
    out[n + k] = std::sin(heading);
    out[2 * n + k] = std::cos(heading);
  }
}

}  // namespace

Vector observe(const ReachTask& task, const Vector& joints, const Vec2& ee) {
  const Index n = joints.size();
  Vector obs(observation_dim(n));
  fill_joint_features(joints, obs.head(3 * n));
  const double inv = 1.0 / task.env.obs_position_scale;
  obs.segment(3 * n, 2) = ee * inv;
  obs.segment(3 * n + 2, 2) = (task.tunnel.goal() - ee) * inv;
  return obs;
}

Matrix observe_batch(const ReachTask& task, const Matrix& joints, const Matrix& ee) {
  Matrix obs(observation_dim(joints.rows()), joints.cols());
  for (Index c = 0; c < joints.cols(); ++c) obs.col(c) = observe(task, joints.col(c), ee.col(c));
  return obs;
}

Tape::Var observe_on_tape(Tape& tape, const ReachTask& task, const Matrix& joints, Tape::Var ee) {
  const Index n = joints.rows();
  const Index count = joints.cols();
  const double inv = 1.0 / task.env.obs_position_scale;
  // obs = fixed part + P * ee, with P selecting +ee and -ee rows.
  Matrix fixed = Matrix::Zero(observation_dim(n), count);
  for (Index c = 0; c < count; ++c) {
    Vector col = Vector::Zero(observation_dim(n));
    fill_joint_features(joints.col(c), col.head(3 * n));
    col.segment(3 * n + 2, 2) = task.tunnel.goal() * inv;
    fixed.col(c) = col;
  }
  Matrix selector = Matrix::Zero(observation_dim(n), 2);
  selector.block(3 * n, 0, 2, 2) = inv * Eigen::Matrix2d::Identity();
  selector.block(3 * n + 2, 0, 2, 2) = -inv * Eigen::Matrix2d::Identity();
  return tape.add(tape.constant(std::move(fixed)), tape.matmul(tape.constant(std::move(selector)), ee));
}

Tape::Var shaping_reward_on_tape(Tape& tape, const ReachTask& task, Tape::Var ee) {
  const Matrix value = tape.value(ee);  // copy: pushing nodes may reallocate
  const Index count = value.cols();
  const Tape::Var offset = tape.sub(ee, tape.constant(task.tunnel.goal()));
  // Tiny floor keeps the square-root derivative finite at the goal centre.
  const Tape::Var dist =
      tape.sqrt(tape.add(tape.colwise_sum(tape.square(offset)), tape.constant(Matrix::Constant(1, 1, 1e-12))));

  Matrix slope(1, count);
  Matrix intercept(1, count);
  for (Index c = 0; c < count; ++c) {
    const CenterlinePiece piece = centerline_piece(task.tunnel, value(0, c));
    slope(0, c) = piece.slope;
    intercept(0, c) = piece.intercept;
  }
  Matrix pick_x(1, 2);
  pick_x << 1.0, 0.0;
  Matrix pick_y(1, 2);
  pick_y << 0.0, 1.0;
  const Tape::Var x = tape.matmul(tape.constant(pick_x), ee);
  const Tape::Var y = tape.matmul(tape.constant(pick_y), ee);
  const Tape::Var center = tape.add(tape.mul(tape.constant(std::move(slope)), x), tape.constant(std::move(intercept)));
  const Tape::Var deviation = tape.abs(tape.sub(y, center));
  const Tape::Var penalty = tape.add(dist, tape.scale(deviation, task.reward.beta0));
  return tape.scale(penalty, task.reward.raw_sign ? 1.0 : -1.0);
}

void write_trace_csv(const std::filesystem::path& path, const EpisodeTrace& trace) {
  auto out = fmt::output_file(path.string());
  const Index n = trace.rows.empty() ? 0 : trace.rows.front().joints.size();
  out.print("step");
  for (Index k = 0; k < n; ++k) out.print(",q{}", k);
  out.print(",ee_x,ee_y,reward,collision,done\n");
  for (const auto& row : trace.rows) {
    out.print("{}", row.step);
    for (Index k = 0; k < n; ++k) out.print(",{}", row.joints[k]);
    out.print(",{},{},{},{},{}\n", row.ee.x(), row.ee.y(), row.reward, row.collision ? 1 : 0, row.done ? 1 : 0);
  }
}

}  // namespace morph
