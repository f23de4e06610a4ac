#include "morph/metrics.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace morph {

using Json = nlohmann::ordered_json;

std::vector<Index> cosine_histogram(const std::vector<double>& cosines) {
  std::vector<Index> bins(kCosineBins, 0);
  for (double c : cosines) {
    const auto b = static_cast<int>(std::floor((c + 1.0) * 0.5 * kCosineBins));
    ++bins[static_cast<std::size_t>(std::clamp(b, 0, kCosineBins - 1))];
  }
  return bins;
}

namespace {

Json optional_number(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace

std::string to_json_line(const MetricsRecord& r) {
  Json j;
  j["update_index"] = r.update_index;
  j["env_steps"] = r.env_steps;
  j["mean_return"] = optional_number(r.mean_return);
  j["episodes"] = r.episodes;
  j["goal_rate"] = optional_number(r.goal_rate);
  j["constraint_loss"] = optional_number(r.constraint_loss);
  j["sc_neg_fraction"] = optional_number(r.sc_neg_fraction);
  j["sc_count"] = r.sc_count;
  j["sc_negative"] = r.sc_negative;
  j["sc_histogram"] = r.sc_histogram.empty() ? Json(nullptr) : Json(r.sc_histogram);
  j["last_design_cost"] = optional_number(r.last_design_cost);
  j["design_round"] = r.design_round;
  j["design"] = std::vector<double>(r.design.data(), r.design.data() + r.design.size());
  return j.dump();
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool append) {
  file_ = std::fopen(path.string().c_str(), append ? "ab" : "wb");
  if (file_ == nullptr) throw ConfigError(fmt::format("cannot open metrics file {}", path.string()));
}

MetricsWriter::MetricsWriter(MetricsWriter&& other) noexcept : file_(std::exchange(other.file_, nullptr)) {}

MetricsWriter& MetricsWriter::operator=(MetricsWriter&& other) noexcept {
  if (this != &other) {
    if (file_ != nullptr) std::fclose(file_);
    file_ = std::exchange(other.file_, nullptr);
  }
  return *this;
}

MetricsWriter::~MetricsWriter() {
  if (file_ != nullptr) std::fclose(file_);
}

void MetricsWriter::write(const MetricsRecord& record) {
  if (file_ == nullptr) return;
  const std::string line = to_json_line(record) + "\n";
  if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0) {
    throw std::runtime_error("failed to write metrics record");
  }
}

MetricsFile read_metrics_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read metrics file {}", path.string()));
  MetricsFile out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      ++out.skipped;
      continue;
    }
    out.lines.push_back(line);
  }
  if (out.skipped > 0) spdlog::warn("skipped {} malformed metrics line(s) in {}", out.skipped, path.string());
  return out;
}

void truncate_metrics(const std::filesystem::path& path, Index last_update) {
  if (!std::filesystem::exists(path)) return;
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      const Json j = Json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("update_index")) continue;
      if (j["update_index"].get<Index>() <= last_update) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  for (const auto& line : keep) out << line << '\n';
}

}  // namespace morph
