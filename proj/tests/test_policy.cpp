#include "morph/policy.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace morph;
using morph::testing::central_differences;
using morph::testing::max_relative_error;
using morph::testing::random_vector;

namespace {

ReachTask small_task() {
  return ReachTask{make_zigzag_tunnel(3, 4.0, 35.0, 0.75, 0.25), RewardConfig{}, EnvConfig{}};
}

PolicyNet small_policy(Index arity, Rng& rng) {
  PolicyConfig cfg;
  cfg.actor_hidden = {8, 8};
  cfg.critic_hidden = {8, 8};
  cfg.init_log_std = -1.0;
  cfg.actor_output_gain = 1.0;
  return make_policy(observation_dim(arity), arity, 0.1, cfg, rng);
}

ProxyNet small_proxy(Index arity, Rng& rng) {
  ProxyConfig cfg;
  cfg.hidden = {8, 8};
  ProxyNet p = make_proxy(arity, cfg, rng);
  p.params.values() = random_vector(p.params.size(), rng, 0.3);
  return p;
}

RolloutBatch hand_batch(const Vector& rewards, const Vector& values, const Vector& next_values,
                        std::vector<std::uint8_t> terminal, std::vector<std::uint8_t> episode_end) {
  RolloutBatch b = make_rollout_batch(1, 1, rewards.size());
  b.rewards = rewards;
  b.values = values;
  b.next_values = next_values;
  b.terminal = std::move(terminal);
  b.episode_end = std::move(episode_end);
  return b;
}

std::vector<Index> all_columns(const RolloutBatch& b) {
  std::vector<Index> idx(static_cast<std::size_t>(b.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  return idx;
}

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

}  // namespace

TEST_CASE("log_prob of a sample matches the closed-form density") {
  Rng rng(41);
  const PolicyNet p = small_policy(4, rng);
  const Vector obs = random_vector(observation_dim(4), rng);
  for (int i = 0; i < 20; ++i) {
    const ActionSample s = sample_action(p, obs, rng);
    const Vector mu = mean_action(p, obs);
    const Vector ls = policy_log_std(p);
    double lp = 0.0;
    for (Index k = 0; k < 4; ++k) {
      const double sd = std::exp(ls[k]);
      const double z = (s.action[k] - mu[k]) / sd;
      lp += -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * kPi);
    }
    CHECK(s.log_prob == doctest::Approx(lp).epsilon(1e-12));
  }
}

TEST_CASE("zero-weight actor samples are centred on zero") {
  Rng rng(42);
  PolicyNet p = small_policy(2, rng);
  p.params.values().setZero();  // log_std 0 as well: unit deviation
  const Vector obs = random_vector(observation_dim(2), rng);
  CHECK(mean_action(p, obs).isZero(0.0));
  constexpr int kN = 100000;
  Vector sum = Vector::Zero(2);
  for (int i = 0; i < kN; ++i) sum += sample_action(p, obs, rng).action;
  const Vector mean = sum / kN;
  for (Index k = 0; k < 2; ++k) CHECK(std::abs(mean[k]) < 3.0 / std::sqrt(static_cast<double>(kN)));
}

TEST_CASE("near-deterministic policy stays near the mean") {
  Rng rng(43);
  PolicyNet p = small_policy(1, rng);
  p.params.matrix("log_std").setConstant(-5.0);
  const Vector obs = random_vector(observation_dim(1), rng);
  const double mu = mean_action(p, obs)[0];
  const double sd = std::exp(-5.0);
  constexpr int kN = 20000;
  int within_1e2 = 0;
  int within_3sd = 0;
  for (int i = 0; i < kN; ++i) {
    const double e = std::abs(sample_action(p, obs, rng).action[0] - mu);
    within_1e2 += e < 1e-2 ? 1 : 0;
    within_3sd += e < 3.0 * sd ? 1 : 0;
  }
  // 1e-2 is about 1.5 deviations at this width, so the fraction inside it
  // follows the Gaussian mass rather than 0.99
  const double expected = std::erf(1e-2 / (sd * std::sqrt(2.0)));
  CHECK(std::abs(within_1e2 / static_cast<double>(kN) - expected) < 0.01);
  CHECK(within_3sd / static_cast<double>(kN) > 0.99);
}

TEST_CASE("combined step maps the clipped sample through the proxy") {
  Rng rng(44);
  const ReachTask task = small_task();
  const PolicyNet p = small_policy(3, rng);
  ProxyNet proxy = small_proxy(3, rng);
  const DesignParams d = uniform_design(3, 1.0);
  const KinematicHardware hw(d, 0.1);
  const EnvState s = reset(task, d, hw, rng);
  for (int i = 0; i < 10; ++i) {
    const CombinedSample c = combined_step(p, proxy, task, s, rng);
    CHECK(c.task_action == proxy_apply(proxy, s.joints, s.ee, clip_action(c.action, 0.1)));
  }
  proxy.params.values().setZero();
  CHECK(combined_step(p, proxy, task, s, rng).task_action.isZero(0.0));

  PolicyNet tight = p;
  tight.params.matrix("log_std").setConstant(-5.0);
  proxy = small_proxy(3, rng);
  Rng r1(1);
  Rng r2(2);
  const Vec2 z1 = combined_step(tight, proxy, task, s, r1).task_action;
  const Vec2 z2 = combined_step(tight, proxy, task, s, r2).task_action;
  CHECK((z1 - z2).norm() < 0.05);
}

TEST_CASE("GAE with zero rewards and values is zero") {
  RolloutBatch b = hand_batch(Vector::Zero(5), Vector::Zero(5), Vector::Zero(5), {0, 0, 1, 0, 0}, {0, 0, 1, 0, 1});
  gae_advantages(b, 0.99, 0.95);
  CHECK(b.advantages.isZero(0.0));
  CHECK(b.returns.isZero(0.0));
}

TEST_CASE("GAE of a single terminal step is r - v") {
  RolloutBatch b = hand_batch(Vector::Constant(1, 2.5), Vector::Constant(1, 0.7), Vector::Constant(1, 9.0), {1}, {1});
  gae_advantages(b, 0.99, 0.95);
  CHECK(b.advantages[0] == doctest::Approx(1.8).epsilon(1e-15));
  CHECK(b.returns[0] == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("GAE three-step hand unroll") {
  Vector r(3), v(3), nv(3);
  r << 1.0, 2.0, 3.0;
  v << 0.5, 0.4, 0.3;
  nv << 0.4, 0.3, 0.2;
  RolloutBatch b = hand_batch(r, v, nv, {0, 0, 0}, {0, 0, 1});
  gae_advantages(b, 0.9, 0.95, false);
  // deltas 0.86, 1.87, 2.88; gamma * lambda = 0.855
  CHECK(b.advantages[2] == doctest::Approx(2.88).epsilon(1e-12));
  CHECK(b.advantages[1] == doctest::Approx(4.3324).epsilon(1e-12));
  CHECK(b.advantages[0] == doctest::Approx(4.564202).epsilon(1e-12));

  gae_advantages(b, 0.9, 0.95, true);
  CHECK(std::abs(b.advantages.mean()) < 1e-12);
  const double var = (b.advantages.array() - b.advantages.mean()).square().sum() / 2.0;
  CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(b.returns[0] == doctest::Approx(4.564202 + 0.5).epsilon(1e-12));
}

TEST_CASE("GAE does not leak across episode boundaries") {
  Vector r(4);
  r << 1.0, 0.0, 5.0, 7.0;
  RolloutBatch b = hand_batch(r, Vector::Zero(4), Vector::Zero(4), {0, 1, 0, 0}, {0, 1, 0, 1});
  gae_advantages(b, 0.9, 0.95, false, 2.0);
  CHECK(b.advantages[1] == 0.0);
  CHECK(b.advantages[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(b.advantages[3] == doctest::Approx(14.0).epsilon(1e-15));
  CHECK(b.advantages[2] == doctest::Approx(10.0 + 0.855 * 14.0).epsilon(1e-12));
}

TEST_CASE("cosine similarity examples") {
  CHECK(cosine_similarity(v2(1, 1), v2(2, 2)) == doctest::Approx(1.0));
  CHECK(cosine_similarity(v2(1, 0), v2(0, 1)) == 0.0);
  CHECK(cosine_similarity(v2(1, 0), v2(-1, 0)) == doctest::Approx(-1.0));
  CHECK(cosine_similarity(v2(1, 0), v2(1e-13, 0)) == 0.0);
  CHECK_THROWS_AS(cosine_similarity(v2(1, 0), Vector::Ones(3)), ConfigError);
}

TEST_CASE("projection examples") {
  CHECK(project_if_conflicting(v2(1, 0), v2(0, 1)) == v2(1, 0));
  CHECK((project_if_conflicting(v2(1, -1), v2(0, 1)) - v2(1, 0)).norm() < 1e-15);
  CHECK(project_if_conflicting(v2(-2, 0), v2(1, 0)).norm() < 1e-15);
  CHECK(project_if_conflicting(v2(-2, 3), v2(0, 1e-13)) == v2(-2, 3));
}

TEST_CASE("projection properties on random pairs") {
  Rng rng(45);
  std::uniform_int_distribution<int> dim(1, 12);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  int fired = 0;
  for (int i = 0; i < 10000; ++i) {
    const Index n = dim(rng);
    const Vector gt = random_vector(n, rng, scale(rng));
    const Vector gh = random_vector(n, rng, scale(rng));
    const Vector p = project_if_conflicting(gt, gh);
    CHECK(p.norm() <= gt.norm() * (1.0 + 1e-12));
    const double c = cosine_similarity(gt, gh);
    if (c < 0.0) {
      ++fired;
      CHECK(std::abs(p.dot(gh)) < 1e-9 * gt.norm() * gh.norm());
    } else {
      CHECK(p == gt);
    }
    CHECK((project_if_conflicting(p, gh) - p).norm() <= 1e-12 * std::max(1.0, p.norm()));
    const double k = scale(rng);
    CHECK(cosine_similarity(Vector(k * gt), gh) == doctest::Approx(c).epsilon(1e-12));
  }
  CHECK(fired > 3000);
  CHECK(fired < 7000);
}

TEST_CASE("joint loss gradient matches finite differences on theta and psi") {
  Rng rng(46);
  const ReachTask task = small_task();
  const DesignParams d = uniform_design(3, 1.2);
  const KinematicHardware hw(d, 0.1);
  PolicyNet policy = small_policy(3, rng);
  ProxyNet proxy = small_proxy(3, rng);
  RolloutBatch batch = collect_rollouts(policy, hw, task, d, 24, rng);
  JointUpdateConfig cfg;
  cfg.ppo.reward_scale = 0.1;
  cfg.alpha = 3.0;
  gae_advantages(batch, cfg.ppo.gamma, cfg.ppo.lambda, true, cfg.ppo.reward_scale);
  const ParamVector snapshot = policy.params;
  // move away from ratio 1 so the surrogate is exercised off its base point
  policy.params.values() += random_vector(policy.params.size(), rng, 0.02);
  const std::vector<Index> idx = all_columns(batch);

  const JointLoss g = evaluate_joint_loss(policy, snapshot, &proxy, &hw, task, batch, idx, cfg);
  auto total = [&] {
    const JointLoss l = evaluate_joint_loss(policy, snapshot, &proxy, &hw, task, batch, idx, cfg);
    return l.task_loss + l.hw_loss;
  };
  CHECK(g.max_ratio_deviation > 1e-4);
  CHECK(g.max_ratio_deviation < cfg.ppo.clip);
  CHECK(max_relative_error(g.g_task_theta.values(), central_differences(policy.params, total), 1e-4) < 1e-3);
  const Vector psi = g.g_task_psi.values() + g.g_hw_psi.values();
  CHECK(max_relative_error(psi, central_differences(proxy.params, total), 1e-4) < 1e-3);
  CHECK(g.hw_loss == doctest::Approx(cfg.alpha * g.divergence).epsilon(1e-15));
}

TEST_CASE("importance ratios are one before any update") {
  Rng rng(47);
  const ReachTask task = small_task();
  const DesignParams d = uniform_design(3, 1.2);
  const KinematicHardware hw(d, 0.1);
  PolicyNet policy = small_policy(3, rng);
  ProxyNet proxy = small_proxy(3, rng);
  const ProxyHardware proxy_hw(proxy, 0.1);
  RolloutBatch batch = collect_rollouts(policy, proxy_hw, task, d, 64, rng);
  gae_advantages(batch, 0.99, 0.95);
  JointUpdateConfig cfg;
  cfg.ppo.minibatch = 16;
  const JointLoss l = evaluate_joint_loss(policy, policy.params, &proxy, &hw, task, batch, all_columns(batch), cfg);
  CHECK(l.max_ratio_deviation < 1e-10);
  AdamState pa = make_adam_state(policy.params);
  AdamState xa = make_adam_state(proxy.params);
  const UpdateStats s = joint_update(policy, pa, &proxy, &xa, &hw, task, batch, cfg, rng);
  CHECK(s.first_ratio_deviation < 1e-10);
  CHECK(s.minibatches == 4 * cfg.ppo.epochs);
}

TEST_CASE("alpha zero leaves theta on the pure PPO path") {
  Rng rng(48);
  const ReachTask task = small_task();
  const DesignParams d = uniform_design(3, 1.2);
  const KinematicHardware hw(d, 0.1);
  const PolicyNet start = small_policy(3, rng);
  ProxyNet proxy = small_proxy(3, rng);
  RolloutBatch batch = collect_rollouts(start, ProxyHardware(proxy, 0.1), task, d, 64, rng);
  gae_advantages(batch, 0.99, 0.95);
  JointUpdateConfig cfg;
  cfg.alpha = 0.0;
  cfg.ppo.minibatch = 32;

  const JointLoss with = evaluate_joint_loss(start, start.params, &proxy, &hw, task, batch, all_columns(batch), cfg);
  const JointLoss pure = evaluate_joint_loss(start, start.params, nullptr, nullptr, task, batch, all_columns(batch), cfg);
  CHECK(with.g_hw_psi.values().isZero(0.0));
  CHECK((with.g_task_theta.values() - pure.g_task_theta.values()).norm() <=
        1e-12 * pure.g_task_theta.values().norm());

  // Over several minibatches psi moves, and with it the observations psi
  // produces, so theta only keeps the PPO path when they are held fixed.
  cfg.observation_gradient = false;
  PolicyNet a = start;
  PolicyNet b = start;
  AdamState aa = make_adam_state(a.params);
  AdamState ba = make_adam_state(b.params);
  AdamState xa = make_adam_state(proxy.params);
  Rng ra(7);
  Rng rb(7);
  joint_update(a, aa, &proxy, &xa, &hw, task, batch, cfg, ra);
  joint_update(b, ba, nullptr, nullptr, nullptr, task, batch, cfg, rb);
  CHECK((a.params.values() - b.params.values()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero advantages give no actor gradient") {
  Rng rng(49);
  const ReachTask task = small_task();
  const DesignParams d = uniform_design(3, 1.2);
  const KinematicHardware hw(d, 0.1);
  const PolicyNet policy = small_policy(3, rng);
  RolloutBatch batch = collect_rollouts(policy, hw, task, d, 32, rng);
  gae_advantages(batch, 0.99, 0.95);
  batch.advantages.setZero();
  JointUpdateConfig cfg;
  cfg.alpha = 0.0;
  const JointLoss l = evaluate_joint_loss(policy, policy.params, nullptr, nullptr, task, batch, all_columns(batch), cfg);
  double actor = 0.0;
  double critic = 0.0;
  for (const auto& blk : l.g_task_theta.layout()) {
    const double n = l.g_task_theta.matrix(blk).norm();
    if (blk.name.rfind("critic.", 0) == 0) {
      critic += n;
    } else {
      actor += n;
    }
  }
  CHECK(actor < 1e-12);
  CHECK(critic > 0.0);
}

TEST_CASE("non-finite rewards abort the update before any change") {
  Rng rng(50);
  const ReachTask task = small_task();
  const DesignParams d = uniform_design(3, 1.2);
  const KinematicHardware hw(d, 0.1);
  PolicyNet policy = small_policy(3, rng);
  ProxyNet proxy = small_proxy(3, rng);
  RolloutBatch batch = collect_rollouts(policy, hw, task, d, 32, rng);
  gae_advantages(batch, 0.99, 0.95, false);
  batch.advantages[3] = std::nan("");
  const ParamVector before = policy.params;
  const ParamVector proxy_before = proxy.params;
  AdamState pa = make_adam_state(policy.params);
  AdamState xa = make_adam_state(proxy.params);
  JointUpdateConfig cfg;
  cfg.ppo.minibatch = 32;
  CHECK_THROWS_AS(joint_update(policy, pa, &proxy, &xa, &hw, task, batch, cfg, rng), NumericalError);
  CHECK(policy.params.values() == before.values());
  CHECK(proxy.params.values() == proxy_before.values());
  CHECK(pa.step == 0);
}

TEST_CASE("rollouts record consistent transitions") {
  Rng rng(51);
  ReachTask task = small_task();
  task.env.horizon = 10;
  const DesignParams d = uniform_design(3, 1.2);
  const KinematicHardware hw(d, 0.1);
  const PolicyNet policy = small_policy(3, rng);
  const RolloutBatch b = collect_rollouts(policy, hw, task, d, 35, rng);
  CHECK(b.size() == 35);
  CHECK(b.episode_returns.size() == 3);
  for (Index t = 0; t < b.size(); ++t) {
    CHECK((b.next_joints.col(t) - b.joints.col(t) - b.applied.col(t)).norm() < 1e-12);
    CHECK(b.applied.col(t) == clip_action(b.actions.col(t), 0.1));
    CHECK(b.task_actions.col(t) == end_effector(d, b.next_joints.col(t)));
    const bool boundary = (t + 1) % 10 == 0 || t == 34;
    CHECK(static_cast<bool>(b.episode_end[static_cast<std::size_t>(t)]) == boundary);
  }
  CHECK(b.values == values(policy, b.obs));
}
