#include "morph/hwnn.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace morph {

std::string_view to_string(ProxyFeatures f) {
  return f == ProxyFeatures::kEngineered ? "engineered" : "raw";
}

ProxyFeatures proxy_features_from_string(std::string_view s) {
  if (s == "engineered") return ProxyFeatures::kEngineered;
  if (s == "raw") return ProxyFeatures::kRaw;
  throw ConfigError(fmt::format("unknown proxy feature set '{}' (expected engineered or raw)", s));
}

Index proxy_input_dim(Index arity, ProxyFeatures features) {
  return features == ProxyFeatures::kEngineered ? 4 * arity + 2 : 2 * arity + 2;
}

ProxyNet make_proxy(Index arity, const ProxyConfig& config, Rng& rng) {
  if (arity < 1) throw ConfigError("proxy needs at least one joint");
  if (!(config.position_scale > 0.0) || !(config.output_scale > 0.0)) {
    throw ConfigError("proxy position and output scales must be positive");
  }
  ProxyNet proxy;
  proxy.arity = arity;
  proxy.features = config.features;
  proxy.position_scale = config.position_scale;
  proxy.output_scale = config.output_scale;
  proxy.spec.widths.push_back(proxy_input_dim(arity, config.features));
  for (Index w : config.hidden) proxy.spec.widths.push_back(w);
  proxy.spec.widths.push_back(2);
  append_mlp_blocks(proxy.params, proxy.spec);
  proxy.linear_skip = config.linear_skip;
  // With the skip path the MLP starts near zero and only models what the
  // linear map cannot.
  init_mlp_params(proxy.params, proxy.spec, "", rng, proxy.linear_skip ? 0.01 : 1.0);
  if (proxy.linear_skip) proxy.params.add_block("skip", 2, proxy.spec.input_dim());
  return proxy;
}

namespace {

void check_batch(const ProxyNet& proxy, const StateActionBatch& batch) {
  if (batch.joints.rows() != proxy.arity || batch.actions.rows() != proxy.arity || batch.ee.rows() != 2 ||
      batch.joints.cols() != batch.actions.cols() || batch.joints.cols() != batch.ee.cols()) {
    throw ConfigError(fmt::format("proxy expects {}-joint pairs, got joints {}x{}, ee {}x{}, actions {}x{}",
                                  proxy.arity, batch.joints.rows(), batch.joints.cols(), batch.ee.rows(),
                                  batch.ee.cols(), batch.actions.rows(), batch.actions.cols()));
  }
}

}  // namespace

Matrix proxy_inputs(const ProxyNet& proxy, const StateActionBatch& batch) {
  check_batch(proxy, batch);
  const Index n = proxy.arity;
  const Index count = batch.size();
  Matrix x(proxy.spec.input_dim(), count);
  if (proxy.features == ProxyFeatures::kRaw) {
    x.topRows(n) = batch.joints;
    x.middleRows(n, 2) = batch.ee / proxy.position_scale;
    x.bottomRows(n) = batch.actions;
    return x;
  }
  x.topRows(n) = batch.joints;
  x.middleRows(n, n) = batch.actions;
  for (Index c = 0; c < count; ++c) {
    double heading = 0.0;
    for (Index k = 0; k < n; ++k) {
      heading += batch.joints(k, c) + batch.actions(k, c);
      x(2 * n + k, c) = std::sin(heading);
      x(3 * n + k, c) = std::cos(heading);
    }
  }
  x.bottomRows(2) = batch.ee / proxy.position_scale;
  return x;
}

Matrix proxy_eval_features(const ProxyNet& proxy, const Matrix& features) {
  Matrix out = mlp_eval(proxy.params, proxy.spec, "", features);
  if (proxy.linear_skip) out.noalias() += proxy.params.matrix("skip") * features;
  return proxy.output_scale * out;
}

Tape::Var proxy_forward_features(Tape& tape, const ProxyNet& proxy, Tape::Var features, ParamMode mode) {
  Tape::Var out = mlp_forward(tape, proxy.params, proxy.spec, "", features, mode);
  if (proxy.linear_skip) {
    const ParamBlock& skip = proxy.params.block("skip");
    const Tape::Var w = mode == ParamMode::kTrainable ? tape.parameter(proxy.params, skip)
                                                      : tape.constant(proxy.params.matrix(skip));
    out = tape.add(out, tape.matmul(w, features));
  }
  return tape.scale(out, proxy.output_scale);
}

Matrix proxy_apply(const ProxyNet& proxy, const StateActionBatch& batch) {
  return proxy_eval_features(proxy, proxy_inputs(proxy, batch));
}

Vec2 proxy_apply(const ProxyNet& proxy, const Vector& joints, const Vec2& ee, const Vector& action) {
  StateActionBatch one{joints, ee, action};
  return proxy_apply(proxy, one).col(0);
}

Tape::Var proxy_forward(Tape& tape, const ProxyNet& proxy, const StateActionBatch& batch) {
  return proxy_forward_features(tape, proxy, tape.constant(proxy_inputs(proxy, batch)));
}

Vec2 ProxyHardware::apply(const Vector& joints, const Vec2& ee, const Vector& action) const {
  return proxy_apply(*proxy_, joints, ee, clip_action(action, a_max_));
}

Matrix hardware_targets(const HardwareModel& model, const StateActionBatch& batch) {
  Matrix z(2, batch.size());
  for (Index c = 0; c < batch.size(); ++c) {
    z.col(c) = model.apply(batch.joints.col(c), batch.ee.col(c), batch.actions.col(c));
  }
  return z;
}

Tape::Var divergence_on_tape(Tape& tape, Tape::Var proxy_out, const Matrix& targets) {
  if (targets.cols() == 0) throw UsageError("divergence estimate over an empty batch");
  const Tape::Var diff = tape.sub(proxy_out, tape.constant(targets));
  // Mean over pairs of the squared distance = sum / B.
  return tape.scale(tape.sum(tape.square(diff)), 1.0 / static_cast<double>(targets.cols()));
}

double divergence_estimate(const HardwareModel& hwphy, const ProxyNet& proxy, const StateActionBatch& batch) {
  if (batch.size() == 0) throw UsageError("divergence estimate over an empty batch");
  const Matrix diff = proxy_apply(proxy, batch) - hardware_targets(hwphy, batch);
  return diff.colwise().squaredNorm().mean();
}

DivergenceGradient divergence_with_gradient(const HardwareModel& hwphy, const ProxyNet& proxy,
                                            const StateActionBatch& batch) {
  if (batch.size() == 0) throw UsageError("divergence estimate over an empty batch");
  Tape tape;
  const Tape::Var z = proxy_forward(tape, proxy, batch);
  const Tape::Var d = divergence_on_tape(tape, z, hardware_targets(hwphy, batch));
  DivergenceGradient out;
  out.value = tape.value(d)(0, 0);
  tape.backward(d);
  out.gradient = tape.gradient(proxy.params);
  return out;
}

StateActionBatch random_state_actions(const DesignParams& design, double a_max, Index count, Rng& rng) {
  const Index n = design.arity();
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  std::uniform_real_distribution<double> delta(-a_max, a_max);
  StateActionBatch batch{Matrix(n, count), Matrix(2, count), Matrix(n, count)};
  for (Index c = 0; c < count; ++c) {
    for (Index k = 0; k < n; ++k) batch.joints(k, c) = angle(rng);
    for (Index k = 0; k < n; ++k) batch.actions(k, c) = delta(rng);
    batch.ee.col(c) = end_effector(design, batch.joints.col(c));
  }
  return batch;
}

StateActionBatch select_columns(const StateActionBatch& batch, const std::vector<Index>& columns) {
  const Index count = static_cast<Index>(columns.size());
  StateActionBatch out{Matrix(batch.joints.rows(), count), Matrix(2, count), Matrix(batch.actions.rows(), count)};
  for (Index i = 0; i < count; ++i) {
    out.joints.col(i) = batch.joints.col(columns[static_cast<std::size_t>(i)]);
    out.ee.col(i) = batch.ee.col(columns[static_cast<std::size_t>(i)]);
    out.actions.col(i) = batch.actions.col(columns[static_cast<std::size_t>(i)]);
  }
  return out;
}

RegressionReport regress_proxy(ProxyNet& proxy, AdamState& adam, const HardwareModel& hwphy,
                               const StateActionBatch& data, const AdamConfig& adam_config, Index max_steps,
                               double target, Index minibatch, Rng& rng, Index check_every) {
  if (data.size() == 0) throw UsageError("proxy regression over an empty data set");
  const Matrix targets = hardware_targets(hwphy, data);
  const Matrix inputs = proxy_inputs(proxy, data);
  auto full_divergence = [&] {
    const Matrix z = proxy_eval_features(proxy, inputs);
    return (z - targets).colwise().squaredNorm().mean();
  };

  RegressionReport report;
  report.final_divergence = full_divergence();
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index batch = std::min(minibatch, data.size());
  std::size_t cursor = order.size();
  while (report.steps < max_steps && report.final_divergence >= target) {
    if (cursor + static_cast<std::size_t>(batch) > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    Matrix x(inputs.rows(), batch);
    Matrix y(2, batch);
    for (Index i = 0; i < batch; ++i) {
      x.col(i) = inputs.col(order[cursor + static_cast<std::size_t>(i)]);
      y.col(i) = targets.col(order[cursor + static_cast<std::size_t>(i)]);
    }
    cursor += static_cast<std::size_t>(batch);

    Tape tape;
    const Tape::Var z = proxy_forward_features(tape, proxy, tape.constant(std::move(x)));
    const Tape::Var d = divergence_on_tape(tape, z, y);
    tape.backward(d);
    adam_step(proxy.params, tape.gradient(proxy.params), adam, adam_config);
    ++report.steps;
    if (report.steps % check_every == 0 || report.steps == max_steps) report.final_divergence = full_divergence();
  }
  report.reached_target = report.final_divergence < target;
  return report;
}

}  // namespace morph
