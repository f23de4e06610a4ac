#include "morph/trainer.hpp"

#include "morph/checkpoint.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace morph {

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kMorph: return "morph";
    case Algorithm::kRlNoHw: return "rl-nohw";
    case Algorithm::kCmaesRl: return "cmaes-rl";
  }
  return "morph";
}

Algorithm algorithm_from_string(std::string_view s) {
  if (s == "morph") return Algorithm::kMorph;
  if (s == "rl-nohw") return Algorithm::kRlNoHw;
  if (s == "cmaes-rl") return Algorithm::kCmaesRl;
  throw ConfigError(fmt::format("unknown algorithm '{}' (expected morph, rl-nohw or cmaes-rl)", s));
}

bool returns_converged(const std::vector<double>& history, Index window, double tolerance) {
  const auto w = static_cast<std::size_t>(window);
  if (window < 1 || history.size() < 2 * w) return false;
  auto window_mean = [&](std::size_t begin) -> std::optional<double> {
    double sum = 0.0;
    int count = 0;
    for (std::size_t i = begin; i < begin + w; ++i) {
      if (std::isfinite(history[i])) {
        sum += history[i];
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return sum / count;
  };
  const auto before = window_mean(history.size() - 2 * w);
  const auto recent = window_mean(history.size() - w);
  if (!before || !recent) return false;
  return *recent - *before < tolerance * std::max(1.0, std::abs(*before));
}

std::string design_report(Algorithm algorithm, const DesignParams& design, const DesignBounds& bounds,
                          Index updates, Index env_steps, std::optional<double> last_design_cost,
                          const std::optional<EvalStats>& eval, Index eval_episodes) {
  std::string out;
  out += fmt::format("algorithm: {}\n", to_string(algorithm));
  out += fmt::format("updates: {}\nenv_steps: {}\n", updates, env_steps);
  out += fmt::format("bounds: [{}, {}]\n", bounds.len_min, bounds.len_max);
  out += fmt::format("links: {}\n", design.arity());
  for (Index k = 0; k < design.arity(); ++k) out += fmt::format("link {}: {:.6f}\n", k, design.link_lengths[k]);
  out += fmt::format("total length: {:.6f}\n", design.link_lengths.sum());
  if (last_design_cost) {
    out += fmt::format("last design cost: {:.6g}\n", *last_design_cost);
  } else {
    out += "last design cost: none\n";
  }
  if (eval) {
    out += fmt::format("evaluation ({} episodes, kinematic backend): goal_rate {:.3f}, mean_return {:.4f}, "
                       "mean_collisions {:.3f}\n",
                       eval_episodes, eval->goal_rate, eval->mean_return, eval->mean_collisions);
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
  out << text;
  if (!out.flush()) throw ConfigError(fmt::format("failed writing {}", path.string()));
}

std::optional<double> finite_or_none(double v) {
  return std::isfinite(v) ? std::optional<double>(v) : std::nullopt;
}

Vector assign_checked(const Vector& stored, Index expected, std::string_view what) {
  if (stored.size() != expected) {
    throw ConfigError(fmt::format("checkpoint {} has {} values, config implies {}", what, stored.size(), expected));
  }
  return stored;
}

struct LoopState {
  PolicyNet policy;
  std::optional<ProxyNet> proxy;
  AdamState theta_adam;
  AdamState psi_adam;
  DesignParams design;
  Index update = 0;
  Index env_steps = 0;
  Index since_design = 0;
  std::optional<double> last_design_cost;
  std::vector<double> return_history;
  Rng rng;
};

Checkpoint to_checkpoint(const LoopState& s, Algorithm algorithm, const std::string& config_text) {
  Checkpoint c;
  c.algorithm = std::string(to_string(algorithm));
  c.update_index = s.update;
  c.env_steps = s.env_steps;
  c.updates_since_design = s.since_design;
  c.last_design_cost = s.last_design_cost.value_or(std::numeric_limits<double>::quiet_NaN());
  c.theta = s.policy.params.values();
  if (s.proxy) {
    c.psi = s.proxy->params.values();
    c.psi_adam = s.psi_adam;
  }
  c.phi = s.design.link_lengths;
  c.theta_adam = s.theta_adam;
  c.return_history = s.return_history;
  c.rng_state = serialize_rng(s.rng);
  c.config_text = config_text;
  return c;
}

MetricsRecord base_record(const LoopState& s, const RolloutBatch& batch) {
  MetricsRecord r;
  r.update_index = s.update;
  r.env_steps = s.env_steps;
  r.episodes = static_cast<Index>(batch.episode_returns.size());
  if (!batch.episode_returns.empty()) {
    double sum = 0.0;
    for (double v : batch.episode_returns) sum += v;
    r.mean_return = sum / static_cast<double>(batch.episode_returns.size());
    r.goal_rate = static_cast<double>(batch.goals) / static_cast<double>(batch.episode_returns.size());
  }
  r.design = s.design.link_lengths;
  return r;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, Index update) {
  return dir / "checkpoints" / fmt::format("checkpoint_{:06d}.bin", update);
}

RunArtifacts finish_run(Algorithm algorithm, const TrainerConfig& config, const TrainOptions& options,
                        RunArtifacts art, const std::string& config_text, const LoopState* state) {
  const ReachTask task = make_task(config);
  if (options.final_evaluation) {
    Rng eval_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    art.final_eval = evaluate_design(art.policy, art.design, task, config.eval_episodes, eval_rng);
  }
  std::optional<double> last_cost;
  if (!art.metrics.empty()) last_cost = art.metrics.back().last_design_cost;
  if (state != nullptr) last_cost = state->last_design_cost;
  art.design_report = design_report(algorithm, art.design, config.bounds, art.updates, art.env_steps, last_cost,
                                    art.final_eval, config.eval_episodes);
  if (!options.out_dir.empty()) {
    if (state != nullptr) {
      const auto path = options.out_dir / "checkpoints" / "final.bin";
      save_checkpoint(path, to_checkpoint(*state, algorithm, config_text));
      art.checkpoints.push_back(path);
    }
    write_text(options.out_dir / "design_report.txt", art.design_report);
  }
  spdlog::info("{} finished: {} updates, {} env steps, design [{}]", to_string(algorithm), art.updates,
               art.env_steps, fmt::join(art.design.link_lengths.data(),
                                        art.design.link_lengths.data() + art.design.arity(), ", "));
  return art;
}

void prepare_out_dir(const TrainOptions& options, const std::string& config_text) {
  if (options.out_dir.empty()) return;
  std::filesystem::create_directories(options.out_dir / "checkpoints");
  write_text(options.out_dir / "config.resolved.ini", config_text);
}

// PPO loop shared by the co-optimization run and the fixed-design baseline.
RunArtifacts ppo_loop(Algorithm algorithm, const TrainerConfig& config_in, const TrainOptions& options) {
  const bool with_proxy = algorithm == Algorithm::kMorph;
  TrainerConfig config = config_in;
  std::optional<Checkpoint> resume;
  if (options.resume_from) {
    resume = load_checkpoint(*options.resume_from);
    if (resume->algorithm != to_string(algorithm)) {
      throw ConfigError(fmt::format("checkpoint was written by '{}', not '{}'", resume->algorithm,
                                    to_string(algorithm)));
    }
    config = parse_config(resume->config_text, options.resume_from->string());
  }
  validate_config(config);
  const std::string config_text = serialize_config(config);
  const ReachTask task = make_task(config);
  const Index n = config.links;
  const JointUpdateConfig jcfg = joint_update_config(config);

  RunArtifacts art;
  art.algorithm = algorithm;
  LoopState s;
  s.rng = Rng(config.seed);
  s.design = initial_design(config);
  validate_design(s.design, config.bounds);
  s.policy = make_policy(observation_dim(n), n, config.env.a_max, config.policy, s.rng);
  if (with_proxy) s.proxy = make_proxy(n, config.proxy, s.rng);

  if (resume) {
    s.policy.params.values() = assign_checked(resume->theta, s.policy.params.size(), "theta");
    if (with_proxy) s.proxy->params.values() = assign_checked(resume->psi, s.proxy->params.size(), "psi");
    s.design.link_lengths = assign_checked(resume->phi, n, "phi");
    s.theta_adam = resume->theta_adam;
    if (with_proxy) s.psi_adam = resume->psi_adam;
    s.update = resume->update_index;
    s.env_steps = resume->env_steps;
    s.since_design = resume->updates_since_design;
    s.last_design_cost = finite_or_none(resume->last_design_cost);
    s.return_history = resume->return_history;
    s.rng = deserialize_rng(resume->rng_state);
  } else {
    if (with_proxy && config.proxy.pretrain_samples > 0 && config.proxy.pretrain_max_steps > 0) {
      const KinematicHardware hw(s.design, config.env.a_max);
      const StateActionBatch data =
          random_state_actions(s.design, config.env.a_max, config.proxy.pretrain_samples, s.rng);
      AdamState pre_adam = make_adam_state(s.proxy->params);
      art.pretrain = regress_proxy(*s.proxy, pre_adam, hw, data, config.proxy.adam, config.proxy.pretrain_max_steps,
                                   config.proxy.pretrain_target, config.proxy.pretrain_minibatch, s.rng);
      spdlog::info("proxy pretraining: {} steps, D = {:.3e}", art.pretrain->steps, art.pretrain->final_divergence);
    }
    s.theta_adam = make_adam_state(s.policy.params);
    if (with_proxy) s.psi_adam = make_adam_state(s.proxy->params);
  }

  prepare_out_dir(options, config_text);
  MetricsWriter metrics;
  if (!options.out_dir.empty()) {
    const auto path = options.out_dir / "metrics.jsonl";
    if (resume) truncate_metrics(path, s.update);
    metrics = MetricsWriter(path, resume.has_value());
  }

  const Index horizon_steps = config.rollout_size;
  while (s.env_steps + horizon_steps <= config.total_env_steps &&
         (options.max_updates < 0 || s.update < options.max_updates)) {
    const Checkpoint last_good = to_checkpoint(s, algorithm, config_text);
    try {
      std::optional<ProxyHardware> proxy_model;
      if (with_proxy) proxy_model.emplace(*s.proxy, config.env.a_max);
      const KinematicHardware hw(s.design, config.env.a_max);
      const HardwareModel& rollout_model = with_proxy ? static_cast<const HardwareModel&>(*proxy_model) : hw;

      RolloutBatch batch = collect_rollouts(s.policy, rollout_model, task, s.design, horizon_steps, s.rng);
      gae_advantages(batch, config.ppo.gamma, config.ppo.lambda, config.ppo.normalize_advantages,
                     config.ppo.reward_scale);
      JointUpdateConfig step_cfg = jcfg;
      step_cfg.alpha = scheduled_alpha(config, s.env_steps);
      const UpdateStats stats =
          joint_update(s.policy, s.theta_adam, with_proxy ? &*s.proxy : nullptr, with_proxy ? &s.psi_adam : nullptr,
                       with_proxy ? &hw : nullptr, task, batch, step_cfg, s.rng);
      s.env_steps += horizon_steps;
      ++s.update;

      bool design_round = false;
      if (with_proxy && config.design_interval > 0 && ++s.since_design >= config.design_interval) {
        const MatchDataset ds =
            build_match_dataset(s.policy, *s.proxy, task, s.design, config.design_search.match_size, s.rng);
        const DesignSearchResult found =
            derive_design(ds, s.design, config.bounds, config.env.a_max, config.design_search, s.rng);
        s.design = found.design;
        s.last_design_cost = found.cost;
        s.since_design = 0;
        design_round = true;
        spdlog::debug("design search at update {}: cost {:.3e}, {} evaluations", s.update, found.cost,
                      found.evaluations);
      }

      MetricsRecord rec = base_record(s, batch);
      if (with_proxy) {
        const KinematicHardware after(s.design, config.env.a_max);
        const StateActionBatch pairs{batch.joints, batch.ee, batch.applied};
        rec.constraint_loss = divergence_estimate(after, *s.proxy, pairs);
        rec.sc_count = static_cast<Index>(stats.cosines.size());
        rec.sc_negative = stats.conflicts;
        if (!stats.cosines.empty()) rec.sc_neg_fraction = stats.negative_fraction();
        rec.sc_histogram = cosine_histogram(stats.cosines);
        rec.last_design_cost = s.last_design_cost;
        rec.design_round = design_round;
      }
      s.return_history.push_back(rec.mean_return.value_or(std::numeric_limits<double>::quiet_NaN()));
      if (!s.policy.params.all_finite() || (with_proxy && !s.proxy->params.all_finite())) {
        throw NumericalError("parameters became non-finite");
      }
      metrics.write(rec);
      art.metrics.push_back(rec);
      if (s.update % 10 == 0) {
        spdlog::info("update {} env_steps {} return {} D {}", s.update, s.env_steps,
                     rec.mean_return ? fmt::format("{:.3f}", *rec.mean_return) : "n/a",
                     rec.constraint_loss ? fmt::format("{:.3e}", *rec.constraint_loss) : "n/a");
      }
    } catch (const NumericalError& e) {
      if (!options.out_dir.empty()) {
        const auto path = options.out_dir / "checkpoints" / "last_good.bin";
        save_checkpoint(path, last_good);
        spdlog::error("numerical failure at update {}: {}; last good state saved to {}", last_good.update_index + 1,
                      e.what(), path.string());
      }
      throw;
    }

    if (!options.out_dir.empty() && config.checkpoint_interval > 0 && s.update % config.checkpoint_interval == 0) {
      const auto path = checkpoint_path(options.out_dir, s.update);
      save_checkpoint(path, to_checkpoint(s, algorithm, config_text));
      art.checkpoints.push_back(path);
    }
    if (returns_converged(s.return_history, config.convergence_window, config.convergence_tolerance)) {
      art.converged = true;
      spdlog::info("returns converged at update {}", s.update);
      break;
    }
  }

  art.updates = s.update;
  art.env_steps = s.env_steps;
  art.policy = s.policy;
  art.proxy = s.proxy;
  art.design = s.design;
  return finish_run(algorithm, config, options, std::move(art), config_text, &s);
}

}  // namespace

RunArtifacts morph_train(const TrainerConfig& config, const TrainOptions& options) {
  return ppo_loop(Algorithm::kMorph, config, options);
}

RunArtifacts baseline_rl_no_hwopt(const TrainerConfig& config, const TrainOptions& options) {
  return ppo_loop(Algorithm::kRlNoHw, config, options);
}

RunArtifacts baseline_cmaes_inner_rl(const TrainerConfig& config_in, const TrainOptions& options) {
  if (options.resume_from) throw ConfigError("cmaes-rl runs cannot be resumed from a checkpoint");
  TrainerConfig config = config_in;
  validate_config(config);
  const std::string config_text = serialize_config(config);
  const ReachTask task = make_task(config);
  const Index n = config.links;
  const JointUpdateConfig jcfg = joint_update_config(config);
  prepare_out_dir(options, config_text);
  MetricsWriter metrics;
  if (!options.out_dir.empty()) metrics = MetricsWriter(options.out_dir / "metrics.jsonl", false);

  Rng rng(config.seed);
  RunArtifacts art;
  art.algorithm = Algorithm::kCmaesRl;
  art.design = initial_design(config);
  art.policy = make_policy(observation_dim(n), n, config.env.a_max, config.policy, rng);

  CmaesState cma = cmaes_init(lengths_to_latent(art.design.link_lengths, config.bounds),
                              config.design_search.sigma_fraction * latent_range(), config.cmaes_population);
  Index generations = config.cmaes_generations;
  const Index per_generation = cma.lambda * config.cmaes_inner_steps;
  if (per_generation > 0) generations = std::min(generations, config.total_env_steps / per_generation);

  double best_cost = std::numeric_limits<double>::infinity();
  Index update = 0;
  Index env_steps = 0;
  for (Index g = 0; g < generations && (options.max_updates < 0 || update < options.max_updates); ++g) {
    const Matrix pop = cmaes_ask(cma, rng);
    Vector costs(cma.lambda);
    for (Index k = 0; k < cma.lambda; ++k) {
      const DesignParams design{latent_to_lengths(pop.col(k), config.bounds)};
      const KinematicHardware hw(design, config.env.a_max);
      PolicyNet policy = make_policy(observation_dim(n), n, config.env.a_max, config.policy, rng);
      AdamState adam = make_adam_state(policy.params);
      Rng eval_rng(rng());
      double best_return = evaluate_design(policy, design, task, config.eval_episodes, eval_rng).mean_return;
      PolicyNet best_policy = policy;
      Index remaining = config.cmaes_inner_steps;
      while (remaining > 0) {
        const Index steps = std::min(remaining, config.rollout_size);
        RolloutBatch batch = collect_rollouts(policy, hw, task, design, steps, rng);
        gae_advantages(batch, config.ppo.gamma, config.ppo.lambda, config.ppo.normalize_advantages,
                       config.ppo.reward_scale);
        joint_update(policy, adam, nullptr, nullptr, nullptr, task, batch, jcfg, rng);
        remaining -= steps;
        env_steps += steps;
        ++update;
        Rng inner_eval(rng());
        const double ret = evaluate_design(policy, design, task, config.eval_episodes, inner_eval).mean_return;
        if (ret > best_return) {
          best_return = ret;
          best_policy = policy;
        }
        LoopState view;
        view.update = update;
        view.env_steps = env_steps;
        view.design = design;
        MetricsRecord rec = base_record(view, batch);
        if (std::isfinite(best_cost)) rec.last_design_cost = best_cost;
        metrics.write(rec);
        art.metrics.push_back(rec);
      }
      costs[k] = -best_return;
      if (costs[k] < best_cost) {
        best_cost = costs[k];
        art.design = design;
        art.policy = best_policy;
      }
    }
    cmaes_tell(cma, pop, costs);
    spdlog::info("cmaes-rl generation {}: best cost {:.4f}", g, best_cost);
  }
  art.updates = update;
  art.env_steps = env_steps;

  if (!options.out_dir.empty()) {
    LoopState final_state;
    final_state.policy = art.policy;
    final_state.theta_adam = make_adam_state(art.policy.params);
    final_state.design = art.design;
    final_state.update = update;
    final_state.env_steps = env_steps;
    if (std::isfinite(best_cost)) final_state.last_design_cost = best_cost;
    final_state.rng = rng;
    return finish_run(Algorithm::kCmaesRl, config, options, std::move(art), config_text, &final_state);
  }
  return finish_run(Algorithm::kCmaesRl, config, options, std::move(art), config_text, nullptr);
}

RunArtifacts run_algorithm(Algorithm algorithm, const TrainerConfig& config, const TrainOptions& options) {
  switch (algorithm) {
    case Algorithm::kMorph: return morph_train(config, options);
    case Algorithm::kRlNoHw: return baseline_rl_no_hwopt(config, options);
    case Algorithm::kCmaesRl: return baseline_cmaes_inner_rl(config, options);
  }
  throw ConfigError("unknown algorithm");
}

LoadedRun load_run(const std::filesystem::path& path) {
  const Checkpoint c = load_checkpoint(path);
  LoadedRun run;
  run.config = parse_config(c.config_text, path.string());
  run.algorithm = algorithm_from_string(c.algorithm);
  const Index n = run.config.links;
  Rng scratch(0);
  run.policy = make_policy(observation_dim(n), n, run.config.env.a_max, run.config.policy, scratch);
  run.policy.params.values() = assign_checked(c.theta, run.policy.params.size(), "theta");
  if (c.psi.size() > 0) {
    run.proxy = make_proxy(n, run.config.proxy, scratch);
    run.proxy->params.values() = assign_checked(c.psi, run.proxy->params.size(), "psi");
  }
  run.design.link_lengths = assign_checked(c.phi, n, "phi");
  return run;
}

}  // namespace morph
