#pragma once

// Per-update training metrics as JSON lines.

#include "morph/common.hpp"

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace morph {

inline constexpr int kCosineBins = 10;

struct MetricsRecord {
  Index update_index = 0;
  Index env_steps = 0;
  std::optional<double> mean_return;      // raw returns of finished episodes
  Index episodes = 0;
  std::optional<double> goal_rate;        // among finished episodes
  std::optional<double> constraint_loss;  // D at the end of the update
  std::optional<double> sc_neg_fraction;
  Index sc_count = 0;
  Index sc_negative = 0;
  /// Counts of cosine similarities in kCosineBins equal bins over [-1, 1].
  std::vector<Index> sc_histogram;
  std::optional<double> last_design_cost;
  bool design_round = false;
  Vector design;
};

std::vector<Index> cosine_histogram(const std::vector<double>& cosines);

/// Single JSON object, no trailing newline.
std::string to_json_line(const MetricsRecord& record);

/// Append-only writer; every record is flushed as it is written.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  /// Truncates unless `append`.
  MetricsWriter(const std::filesystem::path& path, bool append);
  MetricsWriter(MetricsWriter&& other) noexcept;
  MetricsWriter& operator=(MetricsWriter&& other) noexcept;
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;
  ~MetricsWriter();

  void write(const MetricsRecord& record);
  bool is_open() const { return file_ != nullptr; }

 private:
  std::FILE* file_ = nullptr;
};

struct MetricsFile {
  /// Parsed objects as raw JSON text, one per valid line.
  std::vector<std::string> lines;
  Index skipped = 0;
};

/// Reads a metrics file, skipping lines that do not parse as JSON objects.
MetricsFile read_metrics_lines(const std::filesystem::path& path);

/// Keeps only the lines whose update_index is at most `last_update`.
void truncate_metrics(const std::filesystem::path& path, Index last_update);

}  // namespace morph
