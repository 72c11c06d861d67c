#include "sslecho/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace sslecho::log {
namespace {

std::atomic<int> g_level{static_cast<int>(Level::kWarning)};
std::atomic<long> g_warnings{0};
std::mutex g_mutex;

void emit(Level lvl, const char* tag, std::string_view message) {
  if (static_cast<int>(lvl) < g_level.load()) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "[" << tag << "] " << message << '\n';
}

}  // namespace

void set_level(Level lvl) { g_level.store(static_cast<int>(lvl)); }
Level level() { return static_cast<Level>(g_level.load()); }

void debug(std::string_view message) { emit(Level::kDebug, "debug", message); }
void info(std::string_view message) { emit(Level::kInfo, "info", message); }
void warning(std::string_view message) {
  ++g_warnings;
  emit(Level::kWarning, "warning", message);
}
void error(std::string_view message) { emit(Level::kError, "error", message); }

long warning_count() { return g_warnings.load(); }
void reset_warning_count() { g_warnings.store(0); }

}  // namespace sslecho::log
