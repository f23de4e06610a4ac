#include "morph/designsearch.hpp"

#include <Eigen/Eigenvalues>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace morph {

MatchDataset build_match_dataset(const PolicyNet& policy, const ProxyNet& proxy, const ReachTask& task,
                                 const DesignParams& design, Index m, Rng& rng) {
  const Index n = design.arity();
  MatchDataset ds;
  ds.pairs = StateActionBatch{Matrix(n, m), Matrix(2, m), Matrix(n, m)};
  ds.task_actions.resize(2, m);
  if (m == 0) return ds;
  const ProxyHardware model(proxy, task.env.a_max);
  EnvState state = reset(task, design, model, rng);
  for (Index t = 0; t < m; ++t) {
    const CombinedSample s = combined_step(policy, proxy, task, state, rng);
    const StepResult r = step(task, state, s.action, model, design);
    ds.pairs.joints.col(t) = state.joints;
    ds.pairs.ee.col(t) = state.ee;
    ds.pairs.actions.col(t) = clip_action(s.action, task.env.a_max);
    ds.task_actions.col(t) = s.task_action;
    state = r.done ? reset(task, design, model, rng) : r.next;
  }
  return ds;
}

double match_cost(const DesignParams& design, const MatchDataset& dataset, double a_max) {
  if (dataset.size() == 0) throw UsageError("match cost over an empty dataset");
  double total = 0.0;
  for (Index c = 0; c < dataset.size(); ++c) {
    const Vec2 z = hwphy_apply(design, dataset.pairs.joints.col(c), dataset.pairs.actions.col(c), a_max);
    total += (z - dataset.task_actions.col(c)).squaredNorm();
  }
  return total / static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------
// CMA-ES

CmaesState cmaes_init(const Vector& mean, double sigma, Index lambda) {
  const Index n = mean.size();
  if (n < 1) throw ConfigError("CMA-ES needs at least one dimension");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("CMA-ES step size must be positive");
  CmaesState s;
  s.dim = n;
  s.lambda = lambda > 0 ? lambda : 4 + static_cast<Index>(std::floor(3.0 * std::log(static_cast<double>(n))));
  if (s.lambda < 2) throw ConfigError("CMA-ES population must be at least 2");
  s.mu = s.lambda / 2;
  s.weights.resize(s.mu);
  for (Index i = 0; i < s.mu; ++i) {
    s.weights[i] = std::log(static_cast<double>(s.mu) + 0.5) - std::log(static_cast<double>(i + 1));
  }
  s.weights /= s.weights.sum();
  s.mu_eff = 1.0 / s.weights.squaredNorm();

  const double nd = static_cast<double>(n);
  s.c_sigma = (s.mu_eff + 2.0) / (nd + s.mu_eff + 5.0);
  s.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mu_eff - 1.0) / (nd + 1.0)) - 1.0) + s.c_sigma;
  s.c_c = (4.0 + s.mu_eff / nd) / (nd + 4.0 + 2.0 * s.mu_eff / nd);
  s.c_1 = 2.0 / ((nd + 1.3) * (nd + 1.3) + s.mu_eff);
  s.c_mu = std::min(1.0 - s.c_1, 2.0 * (s.mu_eff - 2.0 + 1.0 / s.mu_eff) / ((nd + 2.0) * (nd + 2.0) + s.mu_eff));
  s.chi_n = std::sqrt(nd) * (1.0 - 1.0 / (4.0 * nd) + 1.0 / (21.0 * nd * nd));

  s.mean = mean;
  s.sigma = sigma;
  s.cov = Matrix::Identity(n, n);
  s.basis = Matrix::Identity(n, n);
  s.scales = Vector::Ones(n);
  s.p_sigma = Vector::Zero(n);
  s.p_c = Vector::Zero(n);
  return s;
}

void cmaes_refresh_eigen(CmaesState& state) {
  const Matrix sym = 0.5 * (state.cov + state.cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  Vector ev = eig.eigenvalues();
  if (eig.info() != Eigen::Success || !ev.allFinite()) {
    throw NumericalError("CMA-ES covariance eigen decomposition failed");
  }
  if (ev.minCoeff() <= 1e-12) {
    spdlog::warn("CMA-ES covariance not positive definite (min eigenvalue {}), flooring at 1e-12", ev.minCoeff());
    ev = ev.cwiseMax(1e-12);
    state.cov = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
  } else {
    state.cov = sym;
  }
  state.basis = eig.eigenvectors();
  state.scales = ev.cwiseSqrt();
}

Matrix cmaes_ask(const CmaesState& state, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(state.dim, state.lambda);
  Vector z(state.dim);
  for (Index k = 0; k < state.lambda; ++k) {
    for (Index i = 0; i < state.dim; ++i) z[i] = normal(rng);
    out.col(k) = state.mean + state.sigma * (state.basis * state.scales.cwiseProduct(z));
  }
  return out;
}

void cmaes_tell(CmaesState& s, const Matrix& candidates, const Vector& costs) {
  if (candidates.rows() != s.dim || candidates.cols() != s.lambda || costs.size() != s.lambda) {
    throw ConfigError(fmt::format("cmaes_tell: expected {} candidates of dimension {} with one cost each", s.lambda,
                                  s.dim));
  }
  Vector ranked_costs = costs;
  for (Index k = 0; k < costs.size(); ++k) {
    if (!std::isfinite(costs[k])) {
      spdlog::warn("CMA-ES candidate {} has non-finite cost; ranking it last", k);
      ranked_costs[k] = std::numeric_limits<double>::infinity();
    }
  }
  std::vector<Index> order(static_cast<std::size_t>(s.lambda));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return ranked_costs[a] < ranked_costs[b]; });

  const Index n = s.dim;
  Matrix y(n, s.mu);
  for (Index i = 0; i < s.mu; ++i) y.col(i) = (candidates.col(order[static_cast<std::size_t>(i)]) - s.mean) / s.sigma;
  const Vector y_w = y * s.weights;
  s.mean += s.sigma * y_w;

  const Matrix inv_sqrt = s.basis * s.scales.cwiseInverse().asDiagonal() * s.basis.transpose();
  s.p_sigma = (1.0 - s.c_sigma) * s.p_sigma + std::sqrt(s.c_sigma * (2.0 - s.c_sigma) * s.mu_eff) * (inv_sqrt * y_w);
  const double decay = 1.0 - std::pow(1.0 - s.c_sigma, 2.0 * static_cast<double>(s.generation + 1));
  const bool h_sigma =
      s.p_sigma.norm() / std::sqrt(decay) < (1.4 + 2.0 / (static_cast<double>(n) + 1.0)) * s.chi_n;
  s.p_c = (1.0 - s.c_c) * s.p_c + (h_sigma ? std::sqrt(s.c_c * (2.0 - s.c_c) * s.mu_eff) : 0.0) * y_w;

  const double delta = h_sigma ? 0.0 : s.c_c * (2.0 - s.c_c);
  Matrix rank_mu = Matrix::Zero(n, n);
  for (Index i = 0; i < s.mu; ++i) rank_mu += s.weights[i] * y.col(i) * y.col(i).transpose();
  s.cov = (1.0 - s.c_1 - s.c_mu) * s.cov + s.c_1 * (s.p_c * s.p_c.transpose() + delta * s.cov) + s.c_mu * rank_mu;
  s.sigma *= std::exp((s.c_sigma / s.d_sigma) * (s.p_sigma.norm() / s.chi_n - 1.0));
  if (!std::isfinite(s.sigma) || !s.mean.allFinite()) throw NumericalError("CMA-ES state became non-finite");

  ++s.generation;
  s.evaluations += s.lambda;
  cmaes_refresh_eigen(s);
}

namespace {

// Best-ever gained less than `tolerance` (relative) over `window`
// generations and the latest population is just as flat. The second part
// keeps one lucky early sample from ending a search whose step size is
// still wide.
bool plateaued(const std::vector<double>& history, const Vector& latest_costs, Index window, double tolerance) {
  if (window < 1 || static_cast<Index>(history.size()) <= window) return false;
  const double then = history[history.size() - 1 - static_cast<std::size_t>(window)];
  const double now = history.back();
  if (!std::isfinite(then)) return false;
  if (then - now > tolerance * std::abs(then)) return false;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double c : latest_costs) {
    if (!std::isfinite(c)) return false;
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  return hi - lo <= tolerance * std::abs(then);
}

}  // namespace

CmaesResult cmaes_minimize(const std::function<double(const Vector&)>& cost, const Vector& x0, double sigma0,
                           const CmaesStop& stop, Rng& rng, Index lambda) {
  CmaesState state = cmaes_init(x0, sigma0, lambda);
  CmaesResult result;
  result.best = x0;
  while (result.evaluations + state.lambda <= stop.max_evaluations) {
    const Matrix pop = cmaes_ask(state, rng);
    Vector costs(state.lambda);
    for (Index k = 0; k < state.lambda; ++k) {
      costs[k] = cost(pop.col(k));
      if (std::isfinite(costs[k]) && costs[k] < result.best_cost) {
        result.best_cost = costs[k];
        result.best = pop.col(k);
      }
    }
    result.evaluations += state.lambda;
    cmaes_tell(state, pop, costs);
    result.best_history.push_back(result.best_cost);
    if (result.best_cost <= stop.target) break;
    if (plateaued(result.best_history, costs, stop.plateau_generations, stop.plateau_tolerance)) break;
  }
  result.generations = state.generation;
  result.final_mean = state.mean;
  return result;
}

// ---------------------------------------------------------------------------
// Bounded design search

double latent_range() { return 2.0 * std::log(0.99 / 0.01); }

Vector latent_to_lengths(const Vector& latent, const DesignBounds& bounds) {
  Vector out(latent.size());
  for (Index k = 0; k < latent.size(); ++k) {
    const double s = 1.0 / (1.0 + std::exp(-latent[k]));
    out[k] = std::clamp(bounds.len_min + (bounds.len_max - bounds.len_min) * s, bounds.len_min, bounds.len_max);
  }
  return out;
}

Vector lengths_to_latent(const Vector& lengths, const DesignBounds& bounds) {
  Vector out(lengths.size());
  for (Index k = 0; k < lengths.size(); ++k) {
    const double f = std::clamp((lengths[k] - bounds.len_min) / (bounds.len_max - bounds.len_min), 1e-9, 1.0 - 1e-9);
    out[k] = std::log(f / (1.0 - f));
  }
  return out;
}

DesignSearchResult derive_design(const MatchDataset& dataset, const DesignParams& init, const DesignBounds& bounds,
                                 double a_max, const DesignSearchConfig& config, Rng& rng) {
  validate_design(init, bounds);
  DesignSearchResult result;
  result.design = init;
  result.cost = match_cost(init, dataset, a_max);
  result.evaluations = 1;
  if (config.max_generations <= 0) return result;

  CmaesState state = cmaes_init(lengths_to_latent(init.link_lengths, bounds), config.sigma_fraction * latent_range());
  // The plateau test follows the search's own best, not the initial design,
  // so a good starting point does not end the search early.
  std::vector<double> best_history;
  const double half_range = 0.5 * latent_range();
  double search_best = std::numeric_limits<double>::infinity();
  for (Index g = 0; g < config.max_generations; ++g) {
    const Matrix pop = cmaes_ask(state, rng);
    Vector costs(state.lambda);
    for (Index k = 0; k < state.lambda; ++k) {
      const DesignParams candidate{latent_to_lengths(pop.col(k), bounds)};
      costs[k] = match_cost(candidate, dataset, a_max);
      if (std::isfinite(costs[k])) search_best = std::min(search_best, costs[k]);
      if (std::isfinite(costs[k]) && costs[k] < result.cost) {
        result.cost = costs[k];
        result.design = candidate;
      }
    }
    result.evaluations += state.lambda;
    cmaes_tell(state, pop, costs);
    // Past the box the logistic is flat, so a saturated coordinate stops
    // influencing the cost and the search cannot find its way back. Keep
    // the mean where every coordinate still matters.
    state.mean = state.mean.cwiseMax(-half_range).cwiseMin(half_range);
    best_history.push_back(search_best);
    result.history.push_back(DesignSearchRecord{g, result.cost, latent_to_lengths(state.mean, bounds)});
    if (plateaued(best_history, costs, config.plateau_generations, config.plateau_tolerance)) break;
  }
  return result;
}

}  // namespace morph
