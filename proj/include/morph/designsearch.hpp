#pragma once

// Fitting the kinematic design to the neural proxy: match datasets, a
// CMA-ES optimizer, and the bounded design search that ties them together.

#include "morph/hwnn.hpp"
#include "morph/hwphy.hpp"
#include "morph/policy.hpp"

#include <functional>
#include <limits>
#include <vector>

namespace morph {

/// (s, a, z) tuples; z is the proxy output for the stored pair under the
/// proxy weights at construction time.
struct MatchDataset {
  StateActionBatch pairs;
  Matrix task_actions;  // 2 x m

  Index size() const { return pairs.size(); }
};

/// Rolls out the combined policy (proxy backend, stochastic actions) from
/// fresh resets until exactly `m` tuples are recorded.
MatchDataset build_match_dataset(const PolicyNet& policy, const ProxyNet& proxy, const ReachTask& task,
                                 const DesignParams& design, Index m, Rng& rng);

/// Mean squared distance between the kinematic task action under `design`
/// and the stored z. Throws UsageError on an empty dataset.
double match_cost(const DesignParams& design, const MatchDataset& dataset, double a_max);

struct CmaesState {
  Index dim = 0;
  Index lambda = 0;
  Index mu = 0;
  Vector weights;
  double mu_eff = 0.0;
  double c_sigma = 0.0;
  double d_sigma = 0.0;
  double c_c = 0.0;
  double c_1 = 0.0;
  double c_mu = 0.0;
  double chi_n = 0.0;

  Vector mean;
  double sigma = 1.0;
  Matrix cov;
  Matrix basis;   // eigenvectors of cov
  Vector scales;  // square roots of its eigenvalues
  Vector p_sigma;
  Vector p_c;
  Index generation = 0;
  Index evaluations = 0;
};

/// Standard defaults; `lambda` = 0 selects 4 + floor(3 ln n).
CmaesState cmaes_init(const Vector& mean, double sigma, Index lambda = 0);

/// Recomputes the eigen decomposition of `cov`, flooring eigenvalues at
/// 1e-12 (with a warning) when it is not numerically positive definite.
void cmaes_refresh_eigen(CmaesState& state);

/// lambda candidates as columns, drawn from N(mean, sigma^2 cov).
Matrix cmaes_ask(const CmaesState& state, Rng& rng);

/// Rank-based update from one cost per candidate column. Ties keep the
/// candidate order; non-finite costs rank last.
void cmaes_tell(CmaesState& state, const Matrix& candidates, const Vector& costs);

struct CmaesStop {
  Index max_evaluations = 5000;
  double target = -std::numeric_limits<double>::infinity();
  /// Stop when the best-ever cost improved by less than this relative
  /// amount over `plateau_generations` and the latest population costs
  /// spread by less than the same amount.
  double plateau_tolerance = 1e-8;
  Index plateau_generations = 20;
};

struct CmaesResult {
  Vector best;
  double best_cost = std::numeric_limits<double>::infinity();
  Index evaluations = 0;
  Index generations = 0;
  std::vector<double> best_history;  // best-ever cost after each generation
  Vector final_mean;
};

CmaesResult cmaes_minimize(const std::function<double(const Vector&)>& cost, const Vector& x0, double sigma0,
                           const CmaesStop& stop, Rng& rng, Index lambda = 0);

/// Logistic map from the unbounded search space into [len_min, len_max].
Vector latent_to_lengths(const Vector& latent, const DesignBounds& bounds);
Vector lengths_to_latent(const Vector& lengths, const DesignBounds& bounds);
/// Width of the latent interval that maps onto [1%, 99%] of the bounds.
double latent_range();

struct DesignSearchConfig {
  Index match_size = 2048;
  Index max_generations = 200;
  /// Initial step size as a fraction of latent_range().
  double sigma_fraction = 0.3;
  double plateau_tolerance = 1e-8;
  Index plateau_generations = 20;
};

struct DesignSearchRecord {
  Index generation = 0;
  double best_cost = 0.0;
  Vector mean_design;
};

struct DesignSearchResult {
  DesignParams design;
  double cost = 0.0;
  Index evaluations = 0;
  std::vector<DesignSearchRecord> history;
};

/// Minimizes match_cost over designs within `bounds`, starting from
/// `init`. The initial design counts as a candidate, so the result never
/// costs more than `init`.
DesignSearchResult derive_design(const MatchDataset& dataset, const DesignParams& init, const DesignBounds& bounds,
                                 double a_max, const DesignSearchConfig& config, Rng& rng);

}  // namespace morph
