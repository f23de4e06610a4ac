#pragma once

#include <string_view>

namespace morph {

/// Sets the global log level from MORPH_LOG (trace, debug, info, warn,
/// error, critical, off), falling back to `fallback` when unset. Returns
/// false when MORPH_LOG holds an unrecognised level.
bool configure_logging(std::string_view fallback = "warn");

}  // namespace morph
