#include "morph/designsearch.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace morph;
using morph::testing::random_vector;

namespace {

ReachTask small_task() {
  return ReachTask{make_zigzag_tunnel(3, 4.0, 35.0, 0.75, 0.25), RewardConfig{}, EnvConfig{}};
}

// Tuples whose z comes from the kinematic chain of `design`.
MatchDataset kinematic_dataset(const DesignParams& design, Index m, Rng& rng) {
  MatchDataset ds;
  ds.pairs = random_state_actions(design, 0.1, m, rng);
  ds.task_actions = hardware_targets(KinematicHardware(design, 0.1), ds.pairs);
  return ds;
}

double naive_match_cost(const DesignParams& d, const MatchDataset& ds) {
  double acc = 0.0;
  for (Index i = 0; i < ds.size(); ++i) {
    Vec2 ee = Vec2::Zero();
    double heading = 0.0;
    for (Index k = 0; k < d.arity(); ++k) {
      heading += ds.pairs.joints(k, i) + std::clamp(ds.pairs.actions(k, i), -0.1, 0.1);
      ee += d.link_lengths[k] * Vec2(std::cos(heading), std::sin(heading));
    }
    const Vec2 diff = ee - ds.task_actions.col(i);
    acc += diff.x() * diff.x() + diff.y() * diff.y();
  }
  return acc / static_cast<double>(ds.size());
}

}  // namespace

TEST_CASE("match dataset sizes and determinism") {
  const ReachTask task = small_task();
  const DesignParams d = uniform_design(3, 1.0);
  Rng rng(61);
  PolicyConfig pc;
  pc.actor_hidden = {8};
  pc.critic_hidden = {8};
  const PolicyNet policy = make_policy(observation_dim(3), 3, 0.1, pc, rng);
  ProxyConfig xc;
  xc.hidden = {8};
  const ProxyNet proxy = make_proxy(3, xc, rng);

  Rng r0(1);
  CHECK(build_match_dataset(policy, proxy, task, d, 0, r0).size() == 0);

  Rng r1(5);
  Rng r2(5);
  const MatchDataset a = build_match_dataset(policy, proxy, task, d, 5, r1);
  const MatchDataset b = build_match_dataset(policy, proxy, task, d, 5, r2);
  CHECK(a.size() == 5);
  CHECK(a.pairs.joints == b.pairs.joints);
  CHECK(a.pairs.actions == b.pairs.actions);
  CHECK(a.task_actions == b.task_actions);

  Rng r3(6);
  const MatchDataset big = build_match_dataset(policy, proxy, task, d, 450, r3);  // spans several episodes
  CHECK(big.size() == 450);
  CHECK((big.task_actions - proxy_apply(proxy, big.pairs)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(big.pairs.actions.cwiseAbs().maxCoeff() <= 0.1);
}

TEST_CASE("match cost examples") {
  Rng rng(62);
  const DesignParams star{Vector::LinSpaced(4, 0.5, 2.0)};
  const MatchDataset ds = kinematic_dataset(star, 50, rng);
  CHECK(match_cost(star, ds, 0.1) < 1e-28);

  MatchDataset one;
  one.pairs = StateActionBatch{Matrix::Zero(1, 1), Matrix::Zero(2, 1), Matrix::Zero(1, 1)};
  one.task_actions = Matrix::Ones(2, 1);
  CHECK(match_cost(DesignParams{Vector::Ones(1)}, one, 0.1) == doctest::Approx(1.0).epsilon(1e-15));

  for (int i = 0; i < 20; ++i) {
    DesignParams d{Vector(4)};
    for (Index k = 0; k < 4; ++k) d.link_lengths[k] = std::uniform_real_distribution<double>(0.1, 4.0)(rng);
    MatchDataset noisy = ds;
    noisy.task_actions += morph::testing::random_matrix(2, ds.size(), rng, 0.5);
    const double c = match_cost(d, noisy, 0.1);
    CHECK(c >= 0.0);
    CHECK(c == doctest::Approx(naive_match_cost(d, noisy)).epsilon(1e-12));
  }

  MatchDataset empty;
  empty.pairs = StateActionBatch{Matrix(4, 0), Matrix(2, 0), Matrix(4, 0)};
  empty.task_actions = Matrix(2, 0);
  CHECK_THROWS_AS(match_cost(star, empty, 0.1), UsageError);
}

TEST_CASE("cmaes ask: tiny sigma collapses onto the mean") {
  Rng rng(63);
  CmaesState s = cmaes_init(Vector::LinSpaced(3, -1.0, 1.0), 1e-300);
  const Matrix c = cmaes_ask(s, rng);
  CHECK(c.cols() == 4 + 3);  // 4 + floor(3 ln 3)
  for (Index j = 0; j < c.cols(); ++j) CHECK((c.col(j) - s.mean).norm() < 1e-200);
}

TEST_CASE("cmaes ask: sample moments") {
  Rng rng(64);
  CmaesState s = cmaes_init(Vector::Zero(3), 1.0, 100);
  s.mean << 1.0, -2.0, 0.5;
  Vector sum = Vector::Zero(3);
  for (int i = 0; i < 100; ++i) sum += cmaes_ask(s, rng).rowwise().sum();
  const Vector mean = sum / 1e4;
  for (Index k = 0; k < 3; ++k) CHECK(std::abs(mean[k] - s.mean[k]) < 4.0 / 100.0);

  Matrix a(3, 3);
  a << 2.0, 0.3, 0.0, 0.3, 1.0, -0.4, 0.0, -0.4, 0.5;
  s.cov = a;
  s.sigma = 0.7;
  cmaes_refresh_eigen(s);
  Matrix scatter = Matrix::Zero(3, 3);
  for (int i = 0; i < 1000; ++i) {
    const Matrix c = cmaes_ask(s, rng).colwise() - s.mean;
    scatter += c * c.transpose();
  }
  const Matrix emp = scatter / 1e5;
  const Matrix want = s.sigma * s.sigma * a;
  CHECK((emp - want).norm() < 0.1 * want.norm());
}

TEST_CASE("cmaes tell: equal costs recombine in candidate order") {
  Rng rng(65);
  CmaesState s = cmaes_init(Vector::Zero(4), 0.5);
  const Matrix c = cmaes_ask(s, rng);
  Vector expected = Vector::Zero(4);
  for (Index i = 0; i < s.mu; ++i) expected += s.weights[i] * c.col(i);
  cmaes_tell(s, c, Vector::Constant(c.cols(), 3.0));
  CHECK((s.mean - expected).norm() < 1e-12);
}

TEST_CASE("cmaes tell: non-finite costs rank last") {
  Rng rng(66);
  CmaesState s = cmaes_init(Vector::Zero(2), 0.5, 6);
  const Matrix c = cmaes_ask(s, rng);
  Vector costs(6);
  costs << std::nan(""), 5.0, 4.0, std::numeric_limits<double>::infinity(), 1.0, 2.0;
  const Vector expected = s.weights[0] * c.col(4) + s.weights[1] * c.col(5) + s.weights[2] * c.col(2);
  cmaes_tell(s, c, costs);
  CHECK((s.mean - expected).norm() < 1e-12);
}

TEST_CASE("cmaes repairs a covariance that lost definiteness") {
  CmaesState s = cmaes_init(Vector::Zero(2), 1.0);
  s.cov << 1.0, 1.0, 1.0, 1.0;  // singular
  s.cov(1, 1) -= 1e-9;
  cmaes_refresh_eigen(s);
  CHECK(s.scales.minCoeff() > 0.0);
  CHECK(s.scales.allFinite());
}

TEST_CASE("cmaes sphere benchmark") {
  Rng rng(67);
  Vector c(5);
  c << 1.0, -2.0, 3.0, 0.5, -0.5;
  auto sphere = [&](const Vector& x) { return (x - c).squaredNorm(); };
  CmaesStop stop;
  stop.target = 1e-10;
  const CmaesResult r = cmaes_minimize(sphere, Vector::Zero(5), 1.0, stop, rng);
  CHECK(r.best_cost < 1e-10);
  CHECK(r.evaluations <= 5000);
  for (std::size_t i = 1; i < r.best_history.size(); ++i) CHECK(r.best_history[i] <= r.best_history[i - 1]);
}

TEST_CASE("cmaes shifted ellipsoid benchmark") {
  Rng rng(68);
  Vector opt(4);
  opt << 0.3, -1.2, 2.0, 0.7;
  auto ellipsoid = [&](const Vector& x) {
    double f = 0.0;
    for (Index k = 0; k < 4; ++k) f += std::pow(1e3, k / 3.0) * (x[k] - opt[k]) * (x[k] - opt[k]);
    return f;
  };
  CmaesStop stop;
  stop.max_evaluations = 20000;
  stop.plateau_tolerance = 0.0;
  stop.target = 1e-14;
  const CmaesResult r = cmaes_minimize(ellipsoid, Vector::Zero(4), 1.0, stop, rng);
  CHECK((r.final_mean - opt).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("latent map round trip and bounds") {
  const DesignBounds b{0.05, 5.0};
  Rng rng(69);
  for (int i = 0; i < 100; ++i) {
    const Vector z = random_vector(5, rng, 50.0);
    const Vector l = latent_to_lengths(z, b);
    CHECK(l.minCoeff() >= b.len_min);
    CHECK(l.maxCoeff() <= b.len_max);
  }
  const Vector l = Vector::LinSpaced(5, 0.3, 4.7);
  CHECK((latent_to_lengths(lengths_to_latent(l, b), b) - l).norm() < 1e-12);
}

TEST_CASE("design search with no budget returns the initial design") {
  Rng rng(70);
  const DesignParams init = uniform_design(3, 3.0);
  const MatchDataset ds = kinematic_dataset(uniform_design(3, 1.0), 40, rng);
  DesignSearchConfig cfg;
  cfg.max_generations = 0;
  const DesignSearchResult r = derive_design(ds, init, DesignBounds{}, 0.1, cfg, rng);
  CHECK(r.design.link_lengths == init.link_lengths);
  CHECK(r.cost == match_cost(init, ds, 0.1));
}

TEST_CASE("design search recovers a hidden design") {
  Rng rng(71);
  const DesignBounds bounds;
  std::uniform_real_distribution<double> len(0.5, 4.0);
  for (int trial = 0; trial < 3; ++trial) {
    DesignParams truth{Vector(5)};
    for (Index k = 0; k < 5; ++k) truth.link_lengths[k] = len(rng);
    const MatchDataset ds = kinematic_dataset(truth, 300, rng);
    const DesignParams init = uniform_design(5, 3.0);
    Rng r1(100 + trial);
    const DesignSearchResult r = derive_design(ds, init, bounds, 0.1, DesignSearchConfig{}, r1);
    INFO("truth ", truth.link_lengths.transpose(), " found ", r.design.link_lengths.transpose(), " cost ", r.cost);
    CHECK(r.cost < 1e-6);
    const Vector rel = ((r.design.link_lengths - truth.link_lengths).array() / truth.link_lengths.array()).abs();
    CHECK(rel.maxCoeff() < 0.02);
    CHECK_NOTHROW(validate_design(r.design, bounds));
    for (std::size_t i = 1; i < r.history.size(); ++i) CHECK(r.history[i].best_cost <= r.history[i - 1].best_cost);

    Rng r2(100 + trial);
    const DesignSearchResult again = derive_design(ds, init, bounds, 0.1, DesignSearchConfig{}, r2);
    CHECK(again.design.link_lengths == r.design.link_lengths);
  }
}
