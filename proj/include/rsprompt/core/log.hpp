#pragma once

#include <atomic>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <string>

namespace rsprompt::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline std::atomic<Level>& threshold() {
    static std::atomic<Level> level{Level::warn};
    return level;
}

inline void set_level(Level l) { threshold().store(l); }

inline void write(Level l, const std::string& msg) {
    if (l < threshold().load()) return;
    static std::mutex mu;
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    std::lock_guard lock(mu);
    std::fprintf(stderr, "[rsprompt %s] %s\n", names[static_cast<int>(l)], msg.c_str());
}

template <class... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

template <class... Args> void debug(Args&&... a) { write(Level::debug, cat(std::forward<Args>(a)...)); }
template <class... Args> void info(Args&&... a) { write(Level::info, cat(std::forward<Args>(a)...)); }
template <class... Args> void warn(Args&&... a) { write(Level::warn, cat(std::forward<Args>(a)...)); }
template <class... Args> void error(Args&&... a) { write(Level::error, cat(std::forward<Args>(a)...)); }

}  // namespace rsprompt::log
