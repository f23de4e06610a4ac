#pragma once

// Training loops: the co-optimization loop (policy, proxy and design) and
// the two baselines, with metrics, checkpoints and a design report.

#include "morph/config.hpp"
#include "morph/evaluation.hpp"
#include "morph/metrics.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace morph {

enum class Algorithm { kMorph, kRlNoHw, kCmaesRl };

std::string_view to_string(Algorithm a);
Algorithm algorithm_from_string(std::string_view s);

struct TrainOptions {
  /// Empty: keep everything in memory.
  std::filesystem::path out_dir;
  /// Continue from this checkpoint instead of starting fresh.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many updates in total (negative: no limit); lets a
  /// run be cut short and resumed.
  Index max_updates = -1;
  /// Skip the evaluation that ends a run.
  bool final_evaluation = true;
};

struct RunArtifacts {
  Algorithm algorithm = Algorithm::kMorph;
  PolicyNet policy;
  std::optional<ProxyNet> proxy;
  DesignParams design;
  std::vector<MetricsRecord> metrics;
  std::vector<std::filesystem::path> checkpoints;
  std::string design_report;
  Index updates = 0;
  Index env_steps = 0;
  bool converged = false;
  std::optional<RegressionReport> pretrain;
  std::optional<EvalStats> final_eval;
};

RunArtifacts morph_train(const TrainerConfig& config, const TrainOptions& options = {});
RunArtifacts baseline_rl_no_hwopt(const TrainerConfig& config, const TrainOptions& options = {});
RunArtifacts baseline_cmaes_inner_rl(const TrainerConfig& config, const TrainOptions& options = {});
RunArtifacts run_algorithm(Algorithm algorithm, const TrainerConfig& config, const TrainOptions& options = {});

/// Window-mean test on per-update returns: converged once the mean over the
/// last `window` finite entries gained less than `tolerance` (relative to
/// max(1, |previous mean|)) on the window before it.
bool returns_converged(const std::vector<double>& history, Index window, double tolerance);

std::string design_report(Algorithm algorithm, const DesignParams& design, const DesignBounds& bounds,
                          Index updates, Index env_steps, std::optional<double> last_design_cost,
                          const std::optional<EvalStats>& eval, Index eval_episodes);

/// Rebuilds the policy (and proxy, when stored) of a checkpoint using its
/// embedded config.
struct LoadedRun {
  TrainerConfig config;
  Algorithm algorithm = Algorithm::kMorph;
  PolicyNet policy;
  std::optional<ProxyNet> proxy;
  DesignParams design;
};
LoadedRun load_run(const std::filesystem::path& checkpoint);

}  // namespace morph
