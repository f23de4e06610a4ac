#include "morph/policy.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace morph {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

MlpSpec make_spec(Index in, const std::vector<Index>& hidden, Index out) {
  MlpSpec spec;
  spec.widths.push_back(in);
  for (Index w : hidden) spec.widths.push_back(w);
  spec.widths.push_back(out);
  spec.validate();
  return spec;
}

Matrix pick_columns(const Matrix& m, const std::vector<Index>& idx) {
  Matrix out(m.rows(), static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Index>(i)) = m.col(idx[i]);
  return out;
}

Matrix pick_entries(const Vector& v, const std::vector<Index>& idx) {
  Matrix out(1, static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(0, static_cast<Index>(i)) = v[idx[i]];
  return out;
}

}  // namespace

PolicyNet make_policy(Index obs_dim, Index arity, double a_max, const PolicyConfig& config, Rng& rng) {
  if (arity < 1 || obs_dim < 1) throw ConfigError("policy needs positive observation and action sizes");
  if (!(a_max > 0.0)) throw ConfigError("a_max must be positive");
  PolicyNet p;
  p.arity = arity;
  p.a_max = a_max;
  p.log_std_min = config.log_std_min;
  p.log_std_max = config.log_std_max;
  p.actor = make_spec(obs_dim, config.actor_hidden, arity);
  p.critic = make_spec(obs_dim, config.critic_hidden, 1);
  append_mlp_blocks(p.params, p.actor, "actor.");
  p.params.add_block("log_std", arity, 1);
  append_mlp_blocks(p.params, p.critic, "critic.");
  init_mlp_params(p.params, p.actor, "actor.", rng, config.actor_output_gain);
  init_mlp_params(p.params, p.critic, "critic.", rng);
  p.params.matrix("log_std").setConstant(config.init_log_std);
  clamp_log_std(p);
  return p;
}

void clamp_log_std(PolicyNet& policy) {
  auto s = policy.params.matrix("log_std");
  s = s.cwiseMax(policy.log_std_min).cwiseMin(policy.log_std_max);
}

Matrix mean_actions(const PolicyNet& policy, const Matrix& obs) {
  return policy.a_max * mlp_eval(policy.params, policy.actor, "actor.", obs);
}

Vector mean_action(const PolicyNet& policy, const Vector& obs) { return mean_actions(policy, obs).col(0); }

Vector values(const PolicyNet& policy, const Matrix& obs) {
  return mlp_eval(policy.params, policy.critic, "critic.", obs).row(0).transpose();
}

double value(const PolicyNet& policy, const Vector& obs) { return values(policy, obs)[0]; }

Vector policy_log_std(const PolicyNet& policy) { return policy.params.matrix("log_std").col(0); }

double gaussian_log_prob(const Vector& mean, const Vector& log_std, const Vector& action) {
  double lp = 0.0;
  for (Index k = 0; k < mean.size(); ++k) {
    const double z = (action[k] - mean[k]) * std::exp(-log_std[k]);
    lp += -0.5 * z * z - log_std[k] - kHalfLog2Pi;
  }
  return lp;
}

ActionSample sample_action(const PolicyNet& policy, const Vector& obs, Rng& rng) {
  const Vector mu = mean_action(policy, obs);
  const Vector log_std = policy_log_std(policy);
  std::normal_distribution<double> normal(0.0, 1.0);
  ActionSample s;
  s.action.resize(mu.size());
  for (Index k = 0; k < mu.size(); ++k) s.action[k] = mu[k] + std::exp(log_std[k]) * normal(rng);
  s.log_prob = gaussian_log_prob(mu, log_std, s.action);
  return s;
}

CombinedSample combined_step(const PolicyNet& policy, const ProxyNet& proxy, const ReachTask& task,
                             const EnvState& state, Rng& rng) {
  const ActionSample a = sample_action(policy, observe(task, state.joints, state.ee), rng);
  CombinedSample out;
  out.action = a.action;
  out.log_prob = a.log_prob;
  out.task_action = proxy_apply(proxy, state.joints, state.ee, clip_action(a.action, task.env.a_max));
  return out;
}

RolloutBatch make_rollout_batch(Index obs_dim, Index arity, Index steps) {
  RolloutBatch b;
  b.obs.resize(obs_dim, steps);
  b.joints.resize(arity, steps);
  b.ee.resize(2, steps);
  b.actions.resize(arity, steps);
  b.applied.resize(arity, steps);
  b.task_actions.resize(2, steps);
  b.next_joints.resize(arity, steps);
  b.source_joints.resize(arity, steps);
  b.source_ee.resize(2, steps);
  b.source_actions.resize(arity, steps);
  b.rewards = Vector::Zero(steps);
  b.log_probs = Vector::Zero(steps);
  b.values = Vector::Zero(steps);
  b.next_values = Vector::Zero(steps);
  b.advantages = Vector::Zero(steps);
  b.returns = Vector::Zero(steps);
  b.terminal.assign(static_cast<std::size_t>(steps), 0);
  b.episode_end.assign(static_cast<std::size_t>(steps), 0);
  return b;
}

RolloutBatch collect_rollouts(const PolicyNet& policy, const HardwareModel& model, const ReachTask& task,
                              const DesignParams& design, Index steps, Rng& rng) {
  const Index n = design.arity();
  const Index obs_dim = observation_dim(n);
  RolloutBatch b = make_rollout_batch(obs_dim, n, steps);
  Matrix next_obs(obs_dim, steps);
  if (steps == 0) return b;

  EnvState state = reset(task, design, model, rng);
  // What the model saw when it produced state.ee.
  Vector src_joints = state.joints;
  Vec2 src_ee = end_effector(design, state.joints);
  Vector src_action = Vector::Zero(n);
  double episode_return = 0.0;
  for (Index t = 0; t < steps; ++t) {
    const Vector obs = observe(task, state.joints, state.ee);
    const ActionSample a = sample_action(policy, obs, rng);
    const StepResult r = step(task, state, a.action, model, design);
    b.obs.col(t) = obs;
    b.joints.col(t) = state.joints;
    b.ee.col(t) = state.ee;
    b.actions.col(t) = a.action;
    b.applied.col(t) = clip_action(a.action, task.env.a_max);
    b.task_actions.col(t) = r.next.ee;
    b.next_joints.col(t) = r.next.joints;
    b.source_joints.col(t) = src_joints;
    b.source_ee.col(t) = src_ee;
    b.source_actions.col(t) = src_action;
    b.rewards[t] = r.reward;
    b.log_probs[t] = a.log_prob;
    next_obs.col(t) = observe(task, r.next.joints, r.next.ee);
    b.terminal[static_cast<std::size_t>(t)] = r.info.goal_touched ? 1 : 0;
    if (r.info.collision) ++b.collision_steps;
    if (r.info.goal_touched) ++b.goals;
    episode_return += r.reward;
    if (r.done) {
      b.episode_end[static_cast<std::size_t>(t)] = 1;
      b.episode_returns.push_back(episode_return);
      episode_return = 0.0;
      if (t + 1 < steps) {
        state = reset(task, design, model, rng);
        src_joints = state.joints;
        src_ee = end_effector(design, state.joints);
        src_action.setZero();
      }
    } else {
      src_joints = state.joints;
      src_ee = state.ee;
      src_action = b.applied.col(t);
      state = r.next;
    }
  }
  b.episode_end[static_cast<std::size_t>(steps - 1)] = 1;
  b.values = values(policy, b.obs);
  b.next_values = values(policy, next_obs);
  return b;
}

void gae_advantages(RolloutBatch& batch, double gamma, double lambda, bool normalize, double reward_scale) {
  const Index n = batch.size();
  batch.advantages = Vector::Zero(n);
  double running = 0.0;
  for (Index t = n - 1; t >= 0; --t) {
    const auto st = static_cast<std::size_t>(t);
    const double bootstrap = batch.terminal[st] ? 0.0 : gamma * batch.next_values[t];
    const double delta = reward_scale * batch.rewards[t] + bootstrap - batch.values[t];
    if (batch.episode_end[st]) running = 0.0;
    running = delta + gamma * lambda * running;
    batch.advantages[t] = running;
  }
  batch.returns = batch.advantages + batch.values;
  if (normalize && n > 1) {
    const double mean = batch.advantages.mean();
    const double var = (batch.advantages.array() - mean).square().sum() / static_cast<double>(n - 1);
    batch.advantages = (batch.advantages.array() - mean) / (std::sqrt(var) + 1e-8);
  }
}

double cosine_similarity(const Vector& g1, const Vector& g2) {
  if (g1.size() != g2.size()) throw ConfigError("cosine_similarity: size mismatch");
  const double n1 = g1.norm();
  const double n2 = g2.norm();
  if (n1 < 1e-12 || n2 < 1e-12) return 0.0;
  return std::clamp(g1.dot(g2) / (n1 * n2), -1.0, 1.0);
}

double cosine_similarity(const ParamVector& g1, const ParamVector& g2) {
  if (!g1.same_layout(g2)) throw ConfigError("cosine_similarity: layouts differ");
  return cosine_similarity(g1.values(), g2.values());
}

Vector project_if_conflicting(const Vector& g_task, const Vector& g_hw) {
  if (g_task.size() != g_hw.size()) throw ConfigError("project_if_conflicting: size mismatch");
  const double hw2 = g_hw.squaredNorm();
  if (std::sqrt(hw2) < 1e-12) return g_task;
  if (!(cosine_similarity(g_task, g_hw) < 0.0)) return g_task;
  return g_task - (g_task.dot(g_hw) / hw2) * g_hw;
}

ParamVector project_if_conflicting(const ParamVector& g_task, const ParamVector& g_hw) {
  if (!g_task.same_layout(g_hw)) throw ConfigError("project_if_conflicting: layouts differ");
  ParamVector out = g_task;
  out.values() = project_if_conflicting(g_task.values(), g_hw.values());
  return out;
}

JointLoss evaluate_joint_loss(const PolicyNet& policy, const ParamVector& value_snapshot, const ProxyNet* proxy,
                              const HardwareModel* hwphy, const ReachTask& task, const RolloutBatch& batch,
                              const std::vector<Index>& idx, const JointUpdateConfig& config) {
  if (idx.empty()) throw UsageError("joint loss over an empty minibatch");
  const PpoConfig& ppo = config.ppo;
  const Index n = policy.arity;
  JointLoss out;

  Tape task_tape;
  Tape& tp = task_tape;
  Tape::Var obs;
  if (proxy != nullptr && config.observation_gradient) {
    // The end-effector in each observation is a proxy output; rebuild it on
    // the tape from the pair that produced it.
    const StateActionBatch source{pick_columns(batch.source_joints, idx), pick_columns(batch.source_ee, idx),
                                  pick_columns(batch.source_actions, idx)};
    obs = observe_on_tape(tp, task, pick_columns(batch.joints, idx), proxy_forward(tp, *proxy, source));
  } else {
    obs = tp.constant(pick_columns(batch.obs, idx));
  }
  const Tape::Var mean = tp.scale(mlp_forward(tp, policy.params, policy.actor, "actor.", obs), policy.a_max);
  const Tape::Var log_std = tp.parameter(policy.params, policy.params.block("log_std"));
  const Tape::Var diff = tp.sub(tp.constant(pick_columns(batch.actions, idx)), mean);
  const Tape::Var scaled = tp.mul(diff, tp.exp(tp.scale(log_std, -1.0)));
  const Tape::Var norm_term =
      tp.add(tp.sum(log_std), tp.constant(Matrix::Constant(1, 1, static_cast<double>(n) * kHalfLog2Pi)));
  const Tape::Var log_prob = tp.sub(tp.scale(tp.colwise_sum(tp.square(scaled)), -0.5), norm_term);
  const Tape::Var ratio = tp.exp(tp.sub(log_prob, tp.constant(pick_entries(batch.log_probs, idx))));
  const Tape::Var adv = tp.constant(pick_entries(batch.advantages, idx));
  const Tape::Var surr1 = tp.mul(ratio, adv);
  const Tape::Var surr2 = tp.mul(tp.clamp(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip), adv);
  const Tape::Var policy_loss = tp.scale(tp.mean(tp.minimum(surr1, surr2)), -1.0);

  const Tape::Var v = mlp_forward(tp, policy.params, policy.critic, "critic.", obs);
  const Tape::Var value_loss = tp.mean(tp.square(tp.sub(v, tp.constant(pick_entries(batch.returns, idx)))));

  Tape::Var total = tp.add(policy_loss, tp.scale(value_loss, ppo.value_coef));
  if (ppo.entropy_coef != 0.0) total = tp.sub(total, tp.scale(tp.sum(log_std), ppo.entropy_coef));

  out.max_ratio_deviation = (tp.value(ratio).array() - 1.0).abs().maxCoeff();
  out.policy_loss = tp.value(policy_loss)(0, 0);
  out.value_loss = tp.value(value_loss)(0, 0);

  StateActionBatch sab;
  if (proxy != nullptr) {
    sab = StateActionBatch{pick_columns(batch.joints, idx), pick_columns(batch.ee, idx),
                           pick_columns(batch.applied, idx)};
  }
  if (proxy != nullptr && config.model_return) {
    // One-step model return through the proxy output; the critic is frozen.
    const Tape::Var z = proxy_forward(tp, *proxy, sab);
    const Tape::Var shaping = shaping_reward_on_tape(tp, task, z);
    const Tape::Var next_obs = observe_on_tape(tp, task, pick_columns(batch.next_joints, idx), z);
    const Tape::Var next_v = mlp_forward(tp, value_snapshot, policy.critic, "critic.", next_obs, ParamMode::kFrozen);
    Matrix discount(1, static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      discount(0, static_cast<Index>(i)) = batch.terminal[static_cast<std::size_t>(idx[i])] ? 0.0 : ppo.gamma;
    }
    const Tape::Var model_return =
        tp.add(tp.scale(shaping, ppo.reward_scale), tp.mul(next_v, tp.constant(std::move(discount))));
    const Tape::Var model_loss = tp.scale(tp.mean(model_return), -1.0);
    out.model_loss = tp.value(model_loss)(0, 0);
    total = tp.add(total, model_loss);
  }

  out.task_loss = tp.value(total)(0, 0);
  if (!std::isfinite(out.task_loss)) {
    throw NumericalError(fmt::format("non-finite task loss (policy {}, value {}, model {})", out.policy_loss,
                                     out.value_loss, out.model_loss));
  }
  tp.backward(total);
  out.g_task_theta = tp.gradient(policy.params);

  if (proxy != nullptr) {
    out.g_task_psi = tp.gradient(proxy->params);
    if (hwphy == nullptr) throw UsageError("joint loss with a proxy needs a physical hardware model");
    Tape hw_tape;
    const Tape::Var z = proxy_forward(hw_tape, *proxy, sab);
    const Tape::Var d = divergence_on_tape(hw_tape, z, hardware_targets(*hwphy, sab));
    out.divergence = hw_tape.value(d)(0, 0);
    const Tape::Var hw = hw_tape.scale(d, config.alpha);
    out.hw_loss = hw_tape.value(hw)(0, 0);
    if (!std::isfinite(out.hw_loss)) throw NumericalError(fmt::format("non-finite divergence {}", out.divergence));
    hw_tape.backward(hw);
    out.g_hw_psi = hw_tape.gradient(proxy->params);
  }
  return out;
}

double UpdateStats::negative_fraction() const {
  if (cosines.empty()) return 0.0;
  const auto neg = std::count_if(cosines.begin(), cosines.end(), [](double c) { return c < 0.0; });
  return static_cast<double>(neg) / static_cast<double>(cosines.size());
}

UpdateStats joint_update(PolicyNet& policy, AdamState& policy_adam, ProxyNet* proxy, AdamState* proxy_adam,
                         const HardwareModel* hwphy, const ReachTask& task, const RolloutBatch& batch,
                         const JointUpdateConfig& config, Rng& rng) {
  UpdateStats stats;
  const Index count = batch.size();
  if (count == 0) return stats;
  if (proxy != nullptr && proxy_adam == nullptr) throw UsageError("joint_update: proxy without optimizer state");
  const ParamVector snapshot = policy.params;
  const Index mb = std::clamp<Index>(config.ppo.minibatch, 1, count);

  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < config.ppo.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < count; start += mb) {
      const Index end = std::min(count, start + mb);
      const std::vector<Index> idx(order.begin() + start, order.begin() + end);
      JointLoss loss = evaluate_joint_loss(policy, snapshot, proxy, hwphy, task, batch, idx, config);
      if (stats.minibatches == 0) stats.first_ratio_deviation = loss.max_ratio_deviation;

      ParamVector g_psi;
      if (proxy != nullptr) {
        const double nt = loss.g_task_psi.values().norm();
        const double nh = loss.g_hw_psi.values().norm();
        if (nt > 1e-12 && nh > 1e-12) {
          const double c = cosine_similarity(loss.g_task_psi, loss.g_hw_psi);
          stats.cosines.push_back(c);
          if (c < 0.0) ++stats.conflicts;
        }
        const ParamVector task_part =
            config.projection ? project_if_conflicting(loss.g_task_psi, loss.g_hw_psi) : loss.g_task_psi;
        g_psi = task_part;
        g_psi.values() += loss.g_hw_psi.values();
        if (!g_psi.all_finite()) throw NumericalError("non-finite proxy gradient");
      }
      if (!loss.g_task_theta.all_finite()) throw NumericalError("non-finite policy gradient");

      adam_step(policy.params, loss.g_task_theta, policy_adam, config.ppo.adam);
      clamp_log_std(policy);
      if (proxy != nullptr) adam_step(proxy->params, g_psi, *proxy_adam, config.proxy_adam);

      ++stats.minibatches;
      stats.mean_policy_loss += loss.policy_loss;
      stats.mean_value_loss += loss.value_loss;
      stats.mean_model_loss += loss.model_loss;
      stats.mean_divergence += loss.divergence;
    }
  }
  const double k = static_cast<double>(std::max<Index>(stats.minibatches, 1));
  stats.mean_policy_loss /= k;
  stats.mean_value_loss /= k;
  stats.mean_model_loss /= k;
  stats.mean_divergence /= k;
  return stats;
}

}  // namespace morph
