#pragma once

#include <string_view>

namespace sslecho::log {

enum class Level { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3 };

void set_level(Level level);
Level level();

void debug(std::string_view message);
void info(std::string_view message);
void warning(std::string_view message);
void error(std::string_view message);

// Number of warnings emitted since process start (or the last reset).
// Tests use this to observe fallback paths that only log.
long warning_count();
void reset_warning_count();

}  // namespace sslecho::log
