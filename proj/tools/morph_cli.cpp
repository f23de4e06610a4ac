// morph: train, evaluate and export plot data for co-optimization runs.

#include "morph/checkpoint.hpp"
#include "morph/config.hpp"
#include "morph/evaluation.hpp"
#include "morph/log.hpp"
#include "morph/metrics.hpp"
#include "morph/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/os.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using morph::Index;

namespace {

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string algorithm = "morph";
  std::string checkpoint;
  std::optional<Index> episodes;
};

struct EvalArgs {
  std::string checkpoint;
  std::string out;
  std::optional<Index> episodes;
  std::optional<std::uint64_t> seed;
  std::string backend = "hwphy";
};

struct PlotArgs {
  std::string metrics;
  std::string out;
};

int cmd_train(const TrainArgs& args) {
  morph::TrainerConfig config;
  if (!args.config.empty()) config = morph::load_config(args.config);
  if (args.seed) config.seed = *args.seed;
  if (args.episodes) config.eval_episodes = *args.episodes;
  const morph::Algorithm algorithm = morph::algorithm_from_string(args.algorithm);
  morph::TrainOptions options;
  options.out_dir = args.out;
  if (!args.checkpoint.empty()) {
    options.resume_from = fs::path(args.checkpoint);
    if (!args.config.empty() || args.seed || args.episodes) {
      spdlog::warn("resuming: --config, --seed and --episodes are ignored in favour of the checkpoint's embedded config");
    }
  }
  const morph::RunArtifacts art = morph::run_algorithm(algorithm, config, options);
  fmt::print("{}", art.design_report);
  return 0;
}

int cmd_eval(const EvalArgs& args) {
  if (args.backend != "hwphy") throw morph::ConfigError(fmt::format("unknown backend '{}' (only hwphy)", args.backend));
  const morph::LoadedRun run = morph::load_run(args.checkpoint);
  const Index episodes = args.episodes.value_or(run.config.eval_episodes);
  if (episodes < 1) throw morph::ConfigError("--episodes must be at least 1");
  morph::Rng rng(args.seed.value_or(run.config.seed));
  const morph::ReachTask task = morph::make_task(run.config);
  std::vector<morph::EpisodeTrace> traces;
  const morph::EvalStats stats = morph::evaluate_design(run.policy, run.design, task, episodes, rng, &traces);
  const fs::path out = args.out.empty() ? fs::path(".") : fs::path(args.out);
  fs::create_directories(out);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    morph::write_trace_csv(out / fmt::format("trace_{:04d}.csv", i), traces[i]);
  }
  fmt::print("goal_rate {}\nmean_return {}\nmean_collisions {}\n", stats.goal_rate, stats.mean_return,
             stats.mean_collisions);
  return 0;
}

// ---------------------------------------------------------------------------
// plot-data

struct Series {
  std::string name;
  std::string title;
  std::vector<Index> updates;
  std::vector<std::string> raw;  // field text exactly as in the metrics file, empty for null
  std::vector<double> values;    // NaN for null
};

std::string svg_chart(const Series& s) {
  constexpr double kW = 640, kH = 360, kL = 70, kR = 20, kT = 40, kB = 50;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    if (!std::isfinite(s.values[i])) continue;
    xmin = std::min(xmin, static_cast<double>(s.updates[i]));
    xmax = std::max(xmax, static_cast<double>(s.updates[i]));
    ymin = std::min(ymin, s.values[i]);
    ymax = std::max(ymax, s.values[i]);
  }
  const bool empty = !std::isfinite(xmin);
  if (empty) {
    xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  auto px = [&](double x) { return kL + (x - xmin) / (xmax - xmin) * (kW - kL - kR); };
  auto py = [&](double y) { return kH - kB - (y - ymin) / (ymax - ymin) * (kH - kT - kB); };

  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
      kW, kH, kW, kH, kW / 2, s.title);
  out += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", kL, kH - kB, kW - kR,
                     kH - kB);
  out += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", kL, kT, kL, kH - kB);
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    out += fmt::format(
        "<text x=\"{:.1f}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.4g}</text>\n",
        px(xv), kH - kB + 16, xv);
    out += fmt::format(
        "<text x=\"{}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.4g}</text>\n",
        kL - 6, py(yv) + 4, yv);
  }
  out += fmt::format(
      "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">update</text>\n",
      (kL + kW - kR) / 2, kH - 12);
  if (!empty) {
    std::string points;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (!std::isfinite(s.values[i])) continue;
      points += fmt::format("{:.2f},{:.2f} ", px(static_cast<double>(s.updates[i])), py(s.values[i]));
    }
    out += fmt::format("<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                       points);
  }
  out += "</svg>\n";
  return out;
}

int cmd_plot_data(const PlotArgs& args) {
  using Json = nlohmann::ordered_json;
  const morph::MetricsFile file = morph::read_metrics_lines(args.metrics);
  std::vector<Series> series{{"mean_return", "Mean episode return", {}, {}, {}},
                             {"constraint_loss", "Constraint loss D", {}, {}, {}},
                             {"last_design_cost", "Design search cost", {}, {}, {}},
                             {"sc_neg_fraction", "Negative cosine fraction", {}, {}, {}}};
  Index usable = 0;
  for (const auto& line : file.lines) {
    const Json j = Json::parse(line);
    if (!j.contains("update_index") || !j["update_index"].is_number_integer()) continue;
    ++usable;
    const Index update = j["update_index"].get<Index>();
    for (auto& s : series) {
      s.updates.push_back(update);
      const auto it = j.find(s.name);
      if (it == j.end() || it->is_null()) {
        s.raw.emplace_back();
        s.values.push_back(std::numeric_limits<double>::quiet_NaN());
      } else {
        s.raw.push_back(it->dump());
        s.values.push_back(it->get<double>());
      }
    }
  }
  const fs::path out = args.out.empty() ? fs::path(".") : fs::path(args.out);
  fs::create_directories(out);
  for (const auto& s : series) {
    {
      auto csv = fmt::output_file((out / (s.name + ".csv")).string());
      csv.print("update_index,{}\n", s.name);
      for (std::size_t i = 0; i < s.updates.size(); ++i) csv.print("{},{}\n", s.updates[i], s.raw[i]);
    }
    auto svg = fmt::output_file((out / (s.name + ".svg")).string());
    svg.print("{}", svg_chart(s));
  }
  fmt::print("{} records, {} skipped\n", usable, file.skipped);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  morph::configure_logging("info");
  CLI::App app{"Design and control co-optimization for a planar reacher"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "run an algorithm and write metrics, checkpoints and a report");
  train_cmd->add_option("--config", train.config, "INI run configuration (defaults when omitted)");
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--seed", train.seed, "override the config seed");
  train_cmd->add_option("--algorithm", train.algorithm, "morph, rl-nohw or cmaes-rl")
      ->check(CLI::IsMember({"morph", "rl-nohw", "cmaes-rl"}));
  train_cmd->add_option("--checkpoint", train.checkpoint, "resume from this checkpoint");
  train_cmd->add_option("--episodes", train.episodes, "episodes in the closing evaluation");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the kinematic hardware");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--episodes", eval.episodes, "number of episodes");
  eval_cmd->add_option("--out", eval.out, "directory for trace CSVs");
  eval_cmd->add_option("--seed", eval.seed, "evaluation seed (defaults to the run seed)");
  eval_cmd->add_option("--backend", eval.backend, "hardware backend (hwphy)");

  PlotArgs plot;
  auto* plot_cmd = app.add_subcommand("plot-data", "export per-metric CSV series and SVG charts");
  plot_cmd->add_option("metrics", plot.metrics, "metrics.jsonl")->required();
  plot_cmd->add_option("--out", plot.out, "output directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval);
    if (*plot_cmd) return cmd_plot_data(plot);
  } catch (const morph::ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}
