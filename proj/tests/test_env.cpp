#include "morph/env.hpp"
#include "morph/evaluation.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace morph;
using morph::testing::central_differences;
using morph::testing::max_relative_error;
using morph::testing::random_vector;
using morph::testing::TempDir;

namespace {

ReachTask default_task() {
  return ReachTask{make_zigzag_tunnel(3, 4.0, 35.0, 0.75, 0.25), RewardConfig{}, EnvConfig{}};
}

ReachTask straight_task(double length = 10.0) {
  return ReachTask{TunnelGeometry({Vec2(0, 0), Vec2(length, 0)}, 0.75, Vec2(length, 0), 0.25), RewardConfig{},
                   EnvConfig{}};
}

double recompute_reward(const Vec2& ee, const TunnelGeometry& t, const CollisionResult& c, bool touched,
                        const RewardConfig& cfg) {
  const double dist = std::hypot(ee.x() - t.goal().x(), ee.y() - t.goal().y());
  const double dev = std::fabs(ee.y() - tunnel_centerline_y(t, ee.x()));
  double collide = 0.0;
  if (cfg.collision_mode == CollisionMode::kBinary) {
    collide = c.colliding ? 1.0 : 0.0;
  } else {
    collide = c.max_penetration;
  }
  return -dist - cfg.beta0 * dev - cfg.beta1 * collide + (touched ? cfg.beta2 : 0.0);
}

// Damped least squares toward the goal with a finite-difference Jacobian.
Controller reach_controller(const DesignParams& design, const Vec2& goal) {
  return [design, goal](const EnvState& s, const Vector&) {
    const Index n = design.arity();
    Matrix J(2, n);
    for (Index k = 0; k < n; ++k) {
      Vector q = s.joints;
      q[k] += 1e-6;
      J.col(k) = (end_effector(design, q) - s.ee) / 1e-6;
    }
    const Vec2 err = goal - s.ee;
    const Matrix JJt = J * J.transpose() + 0.01 * Matrix::Identity(2, 2);
    return Vector(J.transpose() * JJt.ldlt().solve(err));
  };
}

}  // namespace

TEST_CASE("zero action leaves joints and end-effector in place") {
  const ReachTask task = default_task();
  const DesignParams d = uniform_design(5, 1.0);
  const KinematicHardware hw(d, task.env.a_max);
  Rng rng(31);
  const EnvState s = reset(task, d, hw, rng);
  const StepResult r = step(task, s, Vector::Zero(5), hw, d);
  CHECK(r.next.joints == s.joints);
  CHECK(r.next.ee == s.ee);
  CHECK(r.next.step_index == s.step_index + 1);
}

TEST_CASE("reset pose follows the entrance heading") {
  const ReachTask task = default_task();
  const DesignParams d = uniform_design(5, 0.6);
  const KinematicHardware hw(d, task.env.a_max);
  Rng rng(32);
  for (int i = 0; i < 20; ++i) {
    const EnvState s = reset(task, d, hw, rng);
    CHECK(std::abs(s.joints[0] - task.tunnel.entrance_heading()) <= task.env.init_noise + 1e-15);
    for (Index k = 1; k < 5; ++k) CHECK(std::abs(s.joints[k]) <= task.env.init_noise + 1e-15);
    CHECK(s.step_index == 0);
    CHECK_FALSE(s.done);
    CHECK(s.ee == end_effector(d, s.joints));
    // a chain short enough for the first leg starts inside the corridor
    CHECK(task.tunnel.contains(s.ee));
  }
}

TEST_CASE("touching the goal ends the episode with the bonus") {
  ReachTask task = straight_task(10.0);
  const DesignParams d = uniform_design(5, 2.0);  // reach 10 along the corridor axis
  const KinematicHardware hw(d, task.env.a_max);
  EnvState s;
  s.joints = Vector::Zero(5);
  s.joints[4] = 0.05;
  s.ee = end_effector(d, s.joints);
  const StepResult r = step(task, s, Vector::Zero(5), hw, d);
  CHECK(r.done);
  CHECK(r.info.goal_touched);
  CHECK(r.reward > 9.0);
  CHECK_THROWS_AS(step(task, r.next, Vector::Zero(5), hw, d), UsageError);
}

TEST_CASE("reward of a constructed step equals the hand-summed terms") {
  ReachTask task = default_task();
  const DesignParams d = uniform_design(5, 3.0);
  const KinematicHardware hw(d, task.env.a_max);
  EnvState s;
  s.joints = Vector::Zero(5);
  s.joints[0] = 0.6;
  s.joints[2] = -0.4;
  s.ee = end_effector(d, s.joints);
  Vector a = Vector::Zero(5);
  a[1] = 0.05;
  const StepResult r = step(task, s, a, hw, d);
  const Vector q = s.joints + a;
  const Vec2 ee = end_effector(d, q);
  const CollisionResult c = collision_check(d, q, task.tunnel, task.env.collision_samples);
  const bool touched = (ee - task.tunnel.goal()).norm() <= task.tunnel.goal_radius();
  CHECK(r.reward == doctest::Approx(recompute_reward(ee, task.tunnel, c, touched, task.reward)).epsilon(1e-12));
  CHECK(r.info.collision == c.colliding);
  CHECK(r.info.goal_distance == doctest::Approx((ee - task.tunnel.goal()).norm()));
}

TEST_CASE("reward at the goal on the centerline is the bonus alone") {
  const ReachTask task = default_task();
  const double r = reward_fn(task.tunnel.goal(), task.tunnel, CollisionResult{}, true, task.reward);
  CHECK(std::abs(r - task.reward.beta2) < 1e-12);
}

TEST_CASE("reward arithmetic on the declared defaults") {
  const ReachTask task = straight_task(10.0);
  const Vec2 ee(10.0 - std::sqrt(4.0 - 0.25), 0.5);  // distance 2, deviation 0.5
  const CollisionResult hit{true, 0.3};
  CHECK(reward_fn(ee, task.tunnel, hit, false, task.reward) == doctest::Approx(-3.25).epsilon(1e-12));
}

TEST_CASE("reward matches an independent recomputation in both collision modes") {
  const ReachTask base = default_task();
  Rng rng(33);
  std::uniform_real_distribution<double> px(-2.0, 12.0);
  std::uniform_real_distribution<double> py(-3.0, 5.0);
  std::uniform_real_distribution<double> pen(0.0, 2.0);
  for (auto mode : {CollisionMode::kBinary, CollisionMode::kPenetration}) {
    RewardConfig cfg;
    cfg.collision_mode = mode;
    for (int i = 0; i < 200; ++i) {
      const Vec2 ee(px(rng), py(rng));
      const CollisionResult c{i % 2 == 0, i % 2 == 0 ? pen(rng) : 0.0};
      const bool touched = i % 7 == 0;
      CHECK(reward_fn(ee, base.tunnel, c, touched, cfg) ==
            doctest::Approx(recompute_reward(ee, base.tunnel, c, touched, cfg)).epsilon(1e-12));
    }
  }
  RewardConfig raw;
  raw.raw_sign = true;
  const Vec2 ee(10.0 - std::sqrt(4.0 - 0.25), 0.5);
  const ReachTask st = straight_task(10.0);
  CHECK(reward_fn(ee, st.tunnel, CollisionResult{true, 0.3}, false, raw) == doctest::Approx(2.0 + 0.25 - 1.0));
}

TEST_CASE("reward is translation invariant") {
  const ReachTask task = default_task();
  Rng rng(34);
  const DesignParams d = uniform_design(5, 2.0);
  for (int i = 0; i < 50; ++i) {
    const Vec2 shift = random_vector(2, rng, 20.0);
    std::vector<Vec2> line = task.tunnel.centerline();
    for (auto& p : line) p += shift;
    const TunnelGeometry moved(line, task.tunnel.halfwidth(), task.tunnel.goal() + shift, task.tunnel.goal_radius());
    const Vector q = random_vector(5, rng, 0.6);
    std::vector<Vec2> chain = forward_kinematics(d, q);
    const CollisionResult c0 = collision_check(chain, task.tunnel);
    for (auto& p : chain) p += shift;
    const CollisionResult c1 = collision_check(chain, moved);
    CHECK(c0.colliding == c1.colliding);
    CHECK(c0.max_penetration == doctest::Approx(c1.max_penetration).epsilon(1e-9));
    const Vec2 ee = forward_kinematics(d, q).back();
    CHECK(reward_fn(ee, task.tunnel, c0, false, task.reward) ==
          doctest::Approx(reward_fn(ee + shift, moved, c1, false, task.reward)).epsilon(1e-9));
  }
}

TEST_CASE("episodes respect the horizon and the kinematic end-effector") {
  ReachTask task = default_task();
  task.env.horizon = 25;
  const DesignParams d = uniform_design(5, 3.0);
  const KinematicHardware hw(d, task.env.a_max);
  Rng rng(35);
  std::normal_distribution<double> noise(0.0, 0.2);
  EnvState s = reset(task, d, hw, rng);
  Index steps = 0;
  while (!s.done) {
    Vector a(5);
    for (Index k = 0; k < 5; ++k) a[k] = noise(rng);
    const StepResult r = step(task, s, a, hw, d);
    CHECK(r.next.ee == end_effector(d, r.next.joints));
    CHECK(r.done == r.next.done);
    s = r.next;
    ++steps;
  }
  CHECK(steps == 25);
  CHECK_THROWS_AS(step(task, s, Vector::Zero(5), hw, d), UsageError);
}

TEST_CASE("collision uses the supplied design, not the backend") {
  const ReachTask task = straight_task(20.0);
  const DesignParams small = uniform_design(5, 0.5);
  const DesignParams big = uniform_design(5, 3.0);
  const KinematicHardware hw(small, task.env.a_max);
  EnvState s;
  s.joints = Vector::Zero(5);
  s.joints[0] = 0.2;  // steep enough that only the long chain leaves the corridor
  s.ee = end_effector(small, s.joints);
  CHECK_FALSE(step(task, s, Vector::Zero(5), hw, small).info.collision);
  CHECK(step(task, s, Vector::Zero(5), hw, big).info.collision);
}

TEST_CASE("observation layout") {
  const ReachTask task = default_task();
  Vector q(3);
  q << 0.3, -0.2, 4.0;
  const Vec2 ee(2.0, 1.0);
  const Vector o = observe(task, q, ee);
  REQUIRE(o.size() == observation_dim(3));
  CHECK(observation_dim(3) == 13);
  CHECK(o[2] == doctest::Approx(wrap_angle(4.0)));
  CHECK(o[3] == doctest::Approx(std::sin(0.3)));
  CHECK(o[4] == doctest::Approx(std::sin(0.1)));
  CHECK(o[6] == doctest::Approx(std::cos(0.3)));
  const double scale = task.env.obs_position_scale;
  CHECK(o[9] == doctest::Approx(2.0 / scale));
  CHECK(o[11] == doctest::Approx((task.tunnel.goal().x() - 2.0) / scale));
  Matrix qs(3, 2);
  qs << q, q;
  Matrix es(2, 2);
  es << ee, ee;
  const Matrix ob = observe_batch(task, qs, es);
  CHECK((ob.col(1) - o).norm() < 1e-15);
}

TEST_CASE("tape observation and shaping agree with the plain versions and differentiate") {
  const ReachTask task = default_task();
  Rng rng(36);
  const Matrix joints = morph::testing::random_matrix(5, 6, rng, 1.0);
  ParamVector p;
  const ParamBlock eb = p.add_block("ee", 2, 6);
  p.matrix("ee") = morph::testing::random_matrix(2, 6, rng, 6.0);
  p.matrix("ee").row(0).array() += 5.0;

  Tape t;
  const Tape::Var ee = t.parameter(p, eb);
  const Matrix obs = t.value(observe_on_tape(t, task, joints, ee));
  const Matrix shaping = t.value(shaping_reward_on_tape(t, task, ee));
  for (Index c = 0; c < 6; ++c) {
    const Vec2 e = p.matrix("ee").col(c);
    CHECK((obs.col(c) - observe(task, joints.col(c), e)).norm() < 1e-12);
    const double expected = reward_fn(e, task.tunnel, CollisionResult{}, false, task.reward);
    CHECK(shaping(0, c) == doctest::Approx(expected).epsilon(1e-9));
  }

  auto total = [&] {
    Tape u;
    const Tape::Var e = u.parameter(p, eb);
    const Tape::Var o = observe_on_tape(u, task, joints, e);
    return u.value(u.add(u.sum(u.square(o)), u.sum(shaping_reward_on_tape(u, task, e))))(0, 0);
  };
  Tape g;
  const Tape::Var e = g.parameter(p, eb);
  g.backward(g.add(g.sum(g.square(observe_on_tape(g, task, joints, e))), g.sum(shaping_reward_on_tape(g, task, e))));
  CHECK(max_relative_error(g.gradient(p).values(), central_differences(p, total)) < 1e-6);
}

TEST_CASE("trace CSV has one column per field") {
  TempDir dir("trace");
  EpisodeTrace trace;
  trace.rows.push_back(TraceRow{0, Vector::Zero(2), Vec2(1.0, 0.0), 0.0, false, false});
  trace.rows.push_back(TraceRow{1, Vector::Constant(2, 0.1), Vec2(0.9, 0.2), -1.5, true, true});
  const auto path = dir.path() / "t.csv";
  write_trace_csv(path, trace);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,q0,q1,ee_x,ee_y,reward,collision,done");
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 7);
  }
  CHECK(rows == 2);
}

TEST_CASE("a policy that never moves cannot reach a far goal") {
  const ReachTask task = default_task();
  const DesignParams d = uniform_design(5, 1.0);
  Rng rng(37);
  const Controller still = [](const EnvState& s, const Vector&) { return Vector(Vector::Zero(s.joints.size())); };
  const EvalStats stats = evaluate_controller(task, d, still, 5, rng);
  CHECK(stats.goal_rate == 0.0);
  CHECK(stats.episodes == 5);
}

TEST_CASE("scripted reaching controller attains the goal every time") {
  const ReachTask task = default_task();
  const DesignParams d = uniform_design(5, 3.0);
  Rng rng(38);
  std::vector<EpisodeTrace> traces;
  const EvalStats stats = evaluate_controller(task, d, reach_controller(d, task.tunnel.goal()), 10, rng, &traces);
  CHECK(stats.goal_rate == 1.0);
  REQUIRE(traces.size() == 10);
  for (const auto& t : traces) {
    CHECK(t.rows.back().done);
    CHECK(static_cast<Index>(t.rows.size()) <= task.env.horizon + 1);
  }
}

TEST_CASE("evaluation statistics do not depend on episode order") {
  const ReachTask task = default_task();
  const DesignParams d = uniform_design(5, 3.0);
  const Controller ctl = reach_controller(d, task.tunnel.goal() + Vec2(0.0, 1.0));
  Rng rng(39);
  std::vector<EpisodeOutcome> outcomes;
  for (int i = 0; i < 6; ++i) outcomes.push_back(run_episode(task, d, ctl, rng));
  auto aggregate = [](const std::vector<EpisodeOutcome>& eps) {
    double ret = 0.0;
    double col = 0.0;
    double goal = 0.0;
    for (const auto& e : eps) {
      ret += e.total_return;
      col += static_cast<double>(e.collision_steps);
      goal += e.reached_goal ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(eps.size());
    return std::array<double, 3>{goal / n, ret / n, col / n};
  };
  const auto forward = aggregate(outcomes);
  std::reverse(outcomes.begin(), outcomes.end());
  const auto backward = aggregate(outcomes);
  for (int k = 0; k < 3; ++k) CHECK(forward[k] == doctest::Approx(backward[k]).epsilon(1e-12));

  Rng again(39);
  const EvalStats stats = evaluate_controller(task, d, ctl, 6, again);
  CHECK(stats.mean_return == doctest::Approx(forward[1]).epsilon(1e-12));
  CHECK(stats.mean_collisions == doctest::Approx(forward[2]).epsilon(1e-12));
}
