#pragma once

// Versioned binary checkpoints: "MORPH" magic, format version, dimensions,
// then counters, flat parameter arrays, optimizer moments, return history,
// generator state and the resolved config text.

#include "morph/diffcore.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace morph {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string algorithm;
  Index update_index = 0;
  Index env_steps = 0;
  Index updates_since_design = 0;
  /// NaN until the first design search.
  double last_design_cost = 0.0;
  Vector theta;
  Vector psi;  // empty when the run has no proxy
  Vector phi;
  AdamState theta_adam;
  AdamState psi_adam;
  std::vector<double> return_history;  // NaN for updates without a finished episode
  std::string rng_state;
  std::string config_text;
};

/// Writes to a sibling temporary file, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

/// Throws ConfigError on a bad magic, a version mismatch (naming both
/// versions) or a truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& state);

}  // namespace morph
