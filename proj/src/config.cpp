#include "morph/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <utility>
#include <vector>

namespace morph {

namespace {

struct Key {
  std::string section;
  std::string name;
  std::string doc;
  std::function<std::string(const TrainerConfig&)> get;
  std::function<void(TrainerConfig&, const std::string&)> set;
};

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("'{}' is not a number", v));
  }
  if (used != v.size()) throw ConfigError(fmt::format("'{}' is not a number", v));
  return d;
}

long long parse_integer(const std::string& v) {
  std::size_t used = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("'{}' is not an integer", v));
  }
  if (used != v.size()) throw ConfigError(fmt::format("'{}' is not an integer", v));
  return i;
}

std::uint64_t parse_unsigned(const std::string& v) {
  std::size_t used = 0;
  unsigned long long u = 0;
  if (!v.empty() && v[0] == '-') throw ConfigError(fmt::format("'{}' is not a non-negative integer", v));
  try {
    u = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("'{}' is not a non-negative integer", v));
  }
  if (used != v.size()) throw ConfigError(fmt::format("'{}' is not a non-negative integer", v));
  return u;
}

bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(fmt::format("'{}' is not true or false", v));
}

std::vector<Index> parse_widths(const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const long long w = parse_integer(trim(item));
    if (w < 1) throw ConfigError(fmt::format("layer width {} must be positive", w));
    out.push_back(static_cast<Index>(w));
  }
  return out;
}

std::string format_widths(const std::vector<Index>& w) { return fmt::format("{}", fmt::join(w, ",")); }

template <typename Access>
Key real_key(std::string section, std::string name, std::string doc, Access access) {
  return Key{std::move(section), std::move(name), std::move(doc),
             [access](const TrainerConfig& c) { return fmt::format("{}", access(const_cast<TrainerConfig&>(c))); },
             [access](TrainerConfig& c, const std::string& v) { access(c) = parse_double(v); }};
}

template <typename Access>
Key int_key(std::string section, std::string name, std::string doc, Access access) {
  return Key{std::move(section), std::move(name), std::move(doc),
             [access](const TrainerConfig& c) { return fmt::format("{}", access(const_cast<TrainerConfig&>(c))); },
             [access](TrainerConfig& c, const std::string& v) {
               using T = std::remove_reference_t<decltype(access(c))>;
               access(c) = static_cast<T>(parse_integer(v));
             }};
}

template <typename Access>
Key bool_key(std::string section, std::string name, std::string doc, Access access) {
  return Key{std::move(section), std::move(name), std::move(doc),
             [access](const TrainerConfig& c) {
               return std::string(access(const_cast<TrainerConfig&>(c)) ? "true" : "false");
             },
             [access](TrainerConfig& c, const std::string& v) { access(c) = parse_bool(v); }};
}

template <typename Access>
Key widths_key(std::string section, std::string name, std::string doc, Access access) {
  return Key{std::move(section), std::move(name), std::move(doc),
             [access](const TrainerConfig& c) { return format_widths(access(const_cast<TrainerConfig&>(c))); },
             [access](TrainerConfig& c, const std::string& v) { access(c) = parse_widths(v); }};
}

const std::vector<Key>& keys() {
  using C = TrainerConfig;
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    // [env]
    k.push_back(int_key("env", "links", "number of links in the chain", [](C& c) -> Index& { return c.links; }));
    k.push_back(real_key("env", "initial_link_length", "starting length of every link",
                         [](C& c) -> double& { return c.initial_link_length; }));
    k.push_back(int_key("env", "horizon", "episode length T", [](C& c) -> Index& { return c.env.horizon; }));
    k.push_back(real_key("env", "a_max", "per-step joint delta bound (rad)", [](C& c) -> double& { return c.env.a_max; }));
    k.push_back(real_key("env", "init_noise", "uniform reset perturbation per joint (rad)",
                         [](C& c) -> double& { return c.env.init_noise; }));
    k.push_back(int_key("env", "collision_samples", "sample points per link for penetration depth",
                        [](C& c) -> int& { return c.env.collision_samples; }));
    k.push_back(real_key("env", "obs_position_scale", "positions are divided by this in observations",
                         [](C& c) -> double& { return c.env.obs_position_scale; }));
    k.push_back(int_key("env", "tunnel_segments", "zigzag legs", [](C& c) -> int& { return c.tunnel.segments; }));
    k.push_back(real_key("env", "tunnel_segment_length", "length of each leg",
                         [](C& c) -> double& { return c.tunnel.segment_length; }));
    k.push_back(real_key("env", "tunnel_slope_deg", "leg slope, alternating sign (degrees)",
                         [](C& c) -> double& { return c.tunnel.slope_deg; }));
    k.push_back(real_key("env", "tunnel_halfwidth", "corridor half width",
                         [](C& c) -> double& { return c.tunnel.halfwidth; }));
    k.push_back(real_key("env", "goal_radius", "goal contact radius", [](C& c) -> double& { return c.tunnel.goal_radius; }));
    // [reward]
    k.push_back(real_key("reward", "beta0", "centerline deviation weight", [](C& c) -> double& { return c.reward.beta0; }));
    k.push_back(real_key("reward", "beta1", "collision weight", [](C& c) -> double& { return c.reward.beta1; }));
    k.push_back(real_key("reward", "beta2", "goal bonus", [](C& c) -> double& { return c.reward.beta2; }));
    k.push_back(Key{"reward", "collision_mode", "binary or penetration",
                    [](const C& c) { return std::string(to_string(c.reward.collision_mode)); },
                    [](C& c, const std::string& v) { c.reward.collision_mode = collision_mode_from_string(v); }});
    k.push_back(bool_key("reward", "raw_sign", "add distance and deviation instead of subtracting them",
                         [](C& c) -> bool& { return c.reward.raw_sign; }));
    // [policy]
    k.push_back(widths_key("policy", "actor_hidden", "actor hidden widths",
                           [](C& c) -> std::vector<Index>& { return c.policy.actor_hidden; }));
    k.push_back(widths_key("policy", "critic_hidden", "critic hidden widths",
                           [](C& c) -> std::vector<Index>& { return c.policy.critic_hidden; }));
    k.push_back(real_key("policy", "init_log_std", "initial action log standard deviation",
                         [](C& c) -> double& { return c.policy.init_log_std; }));
    k.push_back(real_key("policy", "log_std_min", "lower clamp on log std",
                         [](C& c) -> double& { return c.policy.log_std_min; }));
    k.push_back(real_key("policy", "log_std_max", "upper clamp on log std",
                         [](C& c) -> double& { return c.policy.log_std_max; }));
    k.push_back(real_key("policy", "actor_output_gain", "scale on the initial actor output layer",
                         [](C& c) -> double& { return c.policy.actor_output_gain; }));
    k.push_back(real_key("policy", "learning_rate", "Adam step size for actor and critic",
                         [](C& c) -> double& { return c.ppo.adam.learning_rate; }));
    k.push_back(real_key("policy", "clip", "PPO ratio clip", [](C& c) -> double& { return c.ppo.clip; }));
    k.push_back(int_key("policy", "epochs", "PPO epochs per update", [](C& c) -> int& { return c.ppo.epochs; }));
    k.push_back(int_key("policy", "minibatch", "PPO minibatch size", [](C& c) -> Index& { return c.ppo.minibatch; }));
    k.push_back(real_key("policy", "gamma", "discount", [](C& c) -> double& { return c.ppo.gamma; }));
    k.push_back(real_key("policy", "lambda", "GAE lambda", [](C& c) -> double& { return c.ppo.lambda; }));
    k.push_back(real_key("policy", "value_coef", "value loss weight", [](C& c) -> double& { return c.ppo.value_coef; }));
    k.push_back(real_key("policy", "entropy_coef", "entropy bonus weight",
                         [](C& c) -> double& { return c.ppo.entropy_coef; }));
    k.push_back(bool_key("policy", "normalize_advantages", "normalize advantages per batch",
                         [](C& c) -> bool& { return c.ppo.normalize_advantages; }));
    k.push_back(real_key("policy", "reward_scale", "rewards are multiplied by this inside the losses",
                         [](C& c) -> double& { return c.ppo.reward_scale; }));
    // [proxy]
    k.push_back(widths_key("proxy", "hidden", "proxy hidden widths",
                           [](C& c) -> std::vector<Index>& { return c.proxy.hidden; }));
    k.push_back(Key{"proxy", "features", "engineered or raw",
                    [](const C& c) { return std::string(to_string(c.proxy.features)); },
                    [](C& c, const std::string& v) { c.proxy.features = proxy_features_from_string(v); }});
    k.push_back(real_key("proxy", "position_scale", "positions are divided by this at the input",
                         [](C& c) -> double& { return c.proxy.position_scale; }));
    k.push_back(real_key("proxy", "output_scale", "network output is multiplied by this",
                         [](C& c) -> double& { return c.proxy.output_scale; }));
    k.push_back(bool_key("proxy", "linear_skip", "linear path from input features to output beside the MLP",
                         [](C& c) -> bool& { return c.proxy.linear_skip; }));
    k.push_back(real_key("proxy", "pretrain_learning_rate", "Adam step size for pretraining",
                         [](C& c) -> double& { return c.proxy.adam.learning_rate; }));
    k.push_back(real_key("proxy", "train_learning_rate", "Adam step size during co-training",
                         [](C& c) -> double& { return c.proxy_train_adam.learning_rate; }));
    k.push_back(int_key("proxy", "pretrain_samples", "random pairs for pretraining",
                        [](C& c) -> Index& { return c.proxy.pretrain_samples; }));
    k.push_back(int_key("proxy", "pretrain_max_steps", "pretraining step limit",
                        [](C& c) -> Index& { return c.proxy.pretrain_max_steps; }));
    k.push_back(real_key("proxy", "pretrain_target", "pretraining stops once D falls below this",
                         [](C& c) -> double& { return c.proxy.pretrain_target; }));
    k.push_back(int_key("proxy", "pretrain_minibatch", "pretraining minibatch size",
                        [](C& c) -> Index& { return c.proxy.pretrain_minibatch; }));
    // [design_search]
    k.push_back(real_key("design_search", "len_min", "lower link length bound",
                         [](C& c) -> double& { return c.bounds.len_min; }));
    k.push_back(real_key("design_search", "len_max", "upper link length bound",
                         [](C& c) -> double& { return c.bounds.len_max; }));
    k.push_back(int_key("design_search", "interval", "policy updates between design searches (0 = never)",
                        [](C& c) -> Index& { return c.design_interval; }));
    k.push_back(int_key("design_search", "match_size", "tuples in each match dataset",
                        [](C& c) -> Index& { return c.design_search.match_size; }));
    k.push_back(int_key("design_search", "max_generations", "CMA-ES generations per search",
                        [](C& c) -> Index& { return c.design_search.max_generations; }));
    k.push_back(real_key("design_search", "sigma_fraction", "initial step size as a fraction of the latent range",
                         [](C& c) -> double& { return c.design_search.sigma_fraction; }));
    k.push_back(real_key("design_search", "plateau_tolerance", "relative improvement counted as a plateau",
                         [](C& c) -> double& { return c.design_search.plateau_tolerance; }));
    k.push_back(int_key("design_search", "plateau_generations", "plateau window in generations",
                        [](C& c) -> Index& { return c.design_search.plateau_generations; }));
    // [trainer]
    k.push_back(int_key("trainer", "total_env_steps", "environment step budget",
                        [](C& c) -> Index& { return c.total_env_steps; }));
    k.push_back(int_key("trainer", "rollout_size", "environment steps per update (H)",
                        [](C& c) -> Index& { return c.rollout_size; }));
    k.push_back(real_key("trainer", "alpha", "divergence weight", [](C& c) -> double& { return c.alpha; }));
    k.push_back(real_key("trainer", "alpha_final", "divergence weight at the end of the budget (negative = constant)",
                         [](C& c) -> double& { return c.alpha_final; }));
    k.push_back(real_key("trainer", "alpha_ramp_start", "budget fraction after which alpha moves toward alpha_final",
                         [](C& c) -> double& { return c.alpha_ramp_start; }));
    k.push_back(bool_key("trainer", "gradient_projection", "project conflicting task gradients",
                         [](C& c) -> bool& { return c.gradient_projection; }));
    k.push_back(bool_key("trainer", "observation_gradient", "psi also gets the PPO loss through proxy-made observations",
                         [](C& c) -> bool& { return c.observation_gradient; }));
    k.push_back(bool_key("trainer", "model_return", "psi also gets the one-step model return through the proxy",
                         [](C& c) -> bool& { return c.model_return; }));
    k.push_back(Key{"trainer", "seed", "random seed", [](const C& c) { return fmt::format("{}", c.seed); },
                    [](C& c, const std::string& v) { c.seed = parse_unsigned(v); }});
    k.push_back(real_key("trainer", "epsilon", "divergence threshold (reference only, unused)",
                         [](C& c) -> double& { return c.epsilon; }));
    k.push_back(int_key("trainer", "convergence_window", "updates per window of the return-convergence test",
                        [](C& c) -> Index& { return c.convergence_window; }));
    k.push_back(real_key("trainer", "convergence_tolerance", "relative return gain counted as converged",
                         [](C& c) -> double& { return c.convergence_tolerance; }));
    k.push_back(int_key("trainer", "checkpoint_interval", "updates between checkpoints (0 = final only)",
                        [](C& c) -> Index& { return c.checkpoint_interval; }));
    k.push_back(int_key("trainer", "eval_episodes", "episodes per evaluation",
                        [](C& c) -> Index& { return c.eval_episodes; }));
    k.push_back(int_key("trainer", "cmaes_inner_steps", "PPO env steps per candidate (cmaes-rl)",
                        [](C& c) -> Index& { return c.cmaes_inner_steps; }));
    k.push_back(int_key("trainer", "cmaes_generations", "outer generations (cmaes-rl)",
                        [](C& c) -> Index& { return c.cmaes_generations; }));
    k.push_back(int_key("trainer", "cmaes_population", "outer population, 0 = default (cmaes-rl)",
                        [](C& c) -> Index& { return c.cmaes_population; }));
    return k;
  }();
  return table;
}

const std::vector<std::string>& section_order() {
  static const std::vector<std::string> order{"env", "reward", "policy", "proxy", "design_search", "trainer"};
  return order;
}

// Line numbers of "key = value" lines, keyed by (section, key).
std::map<std::pair<std::string, std::string>, int> key_lines(std::string_view text) {
  std::map<std::pair<std::string, std::string>, int> lines;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::string section;
  int number = 0;
  while (std::getline(in, raw)) {
    ++number;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == ';' || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq != std::string::npos) lines.emplace(std::make_pair(section, trim(line.substr(0, eq))), number);
  }
  return lines;
}

void require(bool ok, std::string_view key, std::string_view what) {
  if (!ok) throw ConfigError(fmt::format("{}: {}", key, what));
}

}  // namespace

TrainerConfig parse_config(std::string_view text, std::string_view source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("{}:{}: {}", source, e.line(), e.message()));
  }
  const auto lines = key_lines(text);
  auto where = [&](const std::string& section, const std::string& key) {
    const auto it = lines.find({section, key});
    return it == lines.end() ? std::string(source) : fmt::format("{}:{}", source, it->second);
  };

  TrainerConfig config;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ConfigError(fmt::format("{}: key '{}' appears outside any section", where("", section), section));
    }
    const auto& order = section_order();
    if (std::find(order.begin(), order.end(), section) == order.end()) {
      throw ConfigError(fmt::format("{}: unknown section [{}]", source, section));
    }
    for (const auto& [name, value] : body) {
      const auto& table = keys();
      const auto it = std::find_if(table.begin(), table.end(),
                                   [&](const Key& k) { return k.section == section && k.name == name; });
      if (it == table.end()) {
        throw ConfigError(fmt::format("{}: unknown key '{}' in [{}]", where(section, name), name, section));
      }
      try {
        it->set(config, trim(value.data()));
      } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: [{}] {}: {}", where(section, name), section, name, e.what()));
      }
    }
  }
  validate_config(config);
  return config;
}

TrainerConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path.string());
}

std::string serialize_config(const TrainerConfig& config) {
  std::string out;
  for (const auto& section : section_order()) {
    if (!out.empty()) out += "\n";
    out += fmt::format("[{}]\n", section);
    for (const auto& k : keys()) {
      if (k.section != section) continue;
      out += fmt::format("; {}\n{} = {}\n", k.doc, k.name, k.get(config));
    }
  }
  return out;
}

void validate_config(const TrainerConfig& c) {
  require(c.links >= 1, "env.links", "must be at least 1");
  require(c.bounds.len_min > 0.0 && c.bounds.len_min < c.bounds.len_max, "design_search.len_min",
          "need 0 < len_min < len_max");
  require(c.initial_link_length >= c.bounds.len_min && c.initial_link_length <= c.bounds.len_max,
          "env.initial_link_length", "must lie within [len_min, len_max]");
  require(c.env.horizon >= 1, "env.horizon", "must be positive");
  require(c.env.a_max > 0.0, "env.a_max", "must be positive");
  require(c.env.init_noise >= 0.0, "env.init_noise", "must be non-negative");
  require(c.env.collision_samples >= 2, "env.collision_samples", "must be at least 2");
  require(c.env.obs_position_scale > 0.0, "env.obs_position_scale", "must be positive");
  require(c.tunnel.segments >= 1, "env.tunnel_segments", "must be at least 1");
  require(c.reward.beta0 >= 0.0 && c.reward.beta1 >= 0.0 && c.reward.beta2 >= 0.0, "reward.beta*",
          "must be non-negative");
  require(c.ppo.epochs >= 1, "policy.epochs", "must be positive");
  require(c.ppo.minibatch >= 1, "policy.minibatch", "must be positive");
  require(c.ppo.clip > 0.0, "policy.clip", "must be positive");
  require(c.ppo.gamma >= 0.0 && c.ppo.gamma <= 1.0, "policy.gamma", "must lie in [0, 1]");
  require(c.ppo.lambda >= 0.0 && c.ppo.lambda <= 1.0, "policy.lambda", "must lie in [0, 1]");
  require(c.ppo.adam.learning_rate > 0.0, "policy.learning_rate", "must be positive");
  require(c.policy.log_std_min <= c.policy.log_std_max, "policy.log_std_min", "must not exceed log_std_max");
  require(c.proxy.adam.learning_rate > 0.0, "proxy.pretrain_learning_rate", "must be positive");
  require(c.proxy_train_adam.learning_rate > 0.0, "proxy.train_learning_rate", "must be positive");
  require(c.proxy.pretrain_samples >= 0 && c.proxy.pretrain_max_steps >= 0, "proxy.pretrain_*",
          "must be non-negative");
  require(c.proxy.pretrain_minibatch >= 1, "proxy.pretrain_minibatch", "must be positive");
  require(c.design_interval >= 0, "design_search.interval", "must be non-negative");
  require(c.design_search.match_size >= 1, "design_search.match_size", "must be positive");
  require(c.design_search.max_generations >= 0, "design_search.max_generations", "must be non-negative");
  require(c.design_search.sigma_fraction > 0.0, "design_search.sigma_fraction", "must be positive");
  require(c.total_env_steps >= 0, "trainer.total_env_steps", "must be non-negative");
  require(c.rollout_size >= 1, "trainer.rollout_size", "must be positive");
  require(c.alpha >= 0.0, "trainer.alpha", "must be non-negative");
  require(c.alpha_ramp_start >= 0.0 && c.alpha_ramp_start < 1.0, "trainer.alpha_ramp_start", "must lie in [0, 1)");
  require(c.convergence_window >= 1, "trainer.convergence_window", "must be positive");
  require(c.checkpoint_interval >= 0, "trainer.checkpoint_interval", "must be non-negative");
  require(c.eval_episodes >= 1, "trainer.eval_episodes", "must be positive");
  require(c.cmaes_inner_steps >= 0 && c.cmaes_generations >= 0 && c.cmaes_population >= 0, "trainer.cmaes_*",
          "must be non-negative");
}

ReachTask make_task(const TrainerConfig& c) {
  return ReachTask{make_zigzag_tunnel(c.tunnel.segments, c.tunnel.segment_length, c.tunnel.slope_deg,
                                      c.tunnel.halfwidth, c.tunnel.goal_radius),
                   c.reward, c.env};
}

DesignParams initial_design(const TrainerConfig& c) { return uniform_design(c.links, c.initial_link_length); }

JointUpdateConfig joint_update_config(const TrainerConfig& c) {
  JointUpdateConfig j;
  j.ppo = c.ppo;
  j.alpha = c.alpha;
  j.projection = c.gradient_projection;
  j.observation_gradient = c.observation_gradient;
  j.model_return = c.model_return;
  j.proxy_adam = c.proxy_train_adam;
  return j;
}

double scheduled_alpha(const TrainerConfig& c, Index env_steps) {
  if (c.alpha_final < 0.0 || c.total_env_steps <= 0) return c.alpha;
  const double spent = static_cast<double>(env_steps) / static_cast<double>(c.total_env_steps);
  const double t = std::clamp((spent - c.alpha_ramp_start) / (1.0 - c.alpha_ramp_start), 0.0, 1.0);
  if (c.alpha > 0.0 && c.alpha_final > 0.0) return c.alpha * std::pow(c.alpha_final / c.alpha, t);
  return c.alpha + t * (c.alpha_final - c.alpha);
}

}  // namespace morph
