#include "morph/log.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <string>

namespace morph {

bool configure_logging(std::string_view fallback) {
  const char* env = std::getenv("MORPH_LOG");
  const std::string wanted = env != nullptr ? std::string(env) : std::string(fallback);
  auto level = spdlog::level::from_str(wanted);
  // from_str maps anything unknown to off; only accept that when asked for.
  const bool known = level != spdlog::level::off || wanted == "off";
  if (!known) level = spdlog::level::from_str(std::string(fallback));
  spdlog::set_level(level);
  if (!known) spdlog::warn("MORPH_LOG='{}' is not a log level; using {}", wanted, fallback);
  return known;
}

}  // namespace morph
