#include "rdarts/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace rdarts {

namespace {

std::atomic<LogLevel> g_level{LogLevel::warn};
std::mutex g_mutex;

constexpr std::string_view tag(LogLevel l)
{
    switch (l) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warn: return "warn";
    case LogLevel::error: return "error";
    case LogLevel::off: break;
    }
    return "";
}

} // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_message(LogLevel level, std::string_view msg)
{
    if (level < g_level.load() || level == LogLevel::off) return;
    std::lock_guard lock(g_mutex);
    std::cerr << '[' << tag(level) << "] " << msg << '\n';
}

} // namespace rdarts
