#pragma once

#include <string_view>

namespace rdarts {

enum class LogLevel { debug, info, warn, error, off };

void set_log_level(LogLevel level);
LogLevel log_level();

/// Thread-safe line logging to stderr.
void log_message(LogLevel level, std::string_view msg);
inline void log_info(std::string_view msg) { log_message(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log_message(LogLevel::warn, msg); }

} // namespace rdarts
