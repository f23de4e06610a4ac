#include "morph/evaluation.hpp"

namespace morph {

EpisodeOutcome run_episode(const ReachTask& task, const DesignParams& design, const Controller& controller, Rng& rng) {
  const KinematicHardware model(design, task.env.a_max);
  EpisodeOutcome out;
  EnvState state = reset(task, design, model, rng);
  out.trace.rows.push_back(TraceRow{0, state.joints, state.ee, 0.0, false, false});
  while (!state.done) {
    const Vector action = controller(state, observe(task, state.joints, state.ee));
    const StepResult r = step(task, state, action, model, design);
    out.total_return += r.reward;
    if (r.info.collision) ++out.collision_steps;
    if (r.info.goal_touched) out.reached_goal = true;
    out.trace.rows.push_back(TraceRow{r.next.step_index, r.next.joints, r.next.ee, r.reward, r.info.collision, r.done});
    state = r.next;
  }
  return out;
}

EvalStats evaluate_controller(const ReachTask& task, const DesignParams& design, const Controller& controller,
                              Index n_episodes, Rng& rng, std::vector<EpisodeTrace>* traces) {
  if (n_episodes < 1) throw ConfigError("evaluation needs at least one episode");
  EvalStats stats;
  double goals = 0.0;
  double returns = 0.0;
  double collisions = 0.0;
  for (Index e = 0; e < n_episodes; ++e) {
    EpisodeOutcome o = run_episode(task, design, controller, rng);
    goals += o.reached_goal ? 1.0 : 0.0;
    returns += o.total_return;
    collisions += static_cast<double>(o.collision_steps);
    if (traces != nullptr) traces->push_back(std::move(o.trace));
  }
  const double n = static_cast<double>(n_episodes);
  stats.episodes = n_episodes;
  stats.goal_rate = goals / n;
  stats.mean_return = returns / n;
  stats.mean_collisions = collisions / n;
  return stats;
}

EvalStats evaluate_design(const PolicyNet& policy, const DesignParams& design, const ReachTask& task,
                          Index n_episodes, Rng& rng, std::vector<EpisodeTrace>* traces) {
  const Controller mean_controller = [&policy](const EnvState&, const Vector& obs) {
    return mean_action(policy, obs);
  };
  return evaluate_controller(task, design, mean_controller, n_episodes, rng, traces);
}

}  // namespace morph
