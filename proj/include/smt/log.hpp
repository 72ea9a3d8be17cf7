#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace smt::log {

enum class Level { error = 0, info = 1, debug = 2 };

inline Level level_from_env() {
  const char* v = std::getenv("SMT_LOG");
  if (v == nullptr) return Level::info;
  const std::string_view s(v);
  if (s == "error") return Level::error;
  if (s == "debug") return Level::debug;
  return Level::info;
}

inline Level& threshold() {
  static Level level = level_from_env();
  return level;
}

inline void write(Level lvl, std::string_view tag, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(threshold())) return;
  std::cerr << "[smt " << tag << "] " << msg << '\n';
}

inline void error(const std::string& msg) { write(Level::error, "error", msg); }
inline void warn(const std::string& msg) { write(Level::info, "warn", msg); }
inline void info(const std::string& msg) { write(Level::info, "info", msg); }
inline void debug(const std::string& msg) { write(Level::debug, "debug", msg); }

}  // namespace smt::log
