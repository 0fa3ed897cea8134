#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace fedmob::log {

enum class Level : int { error = 0, warn = 1, info = 2, debug = 3 };

// Level comes from FEDMOB_LOG (error|warn|info|debug), default warn.
inline Level threshold() {
    static Level lvl = [] {
        const char* env = std::getenv("FEDMOB_LOG");
        if (!env) return Level::warn;
        std::string s(env);
        if (s == "error") return Level::error;
        if (s == "info") return Level::info;
        if (s == "debug") return Level::debug;
        return Level::warn;
    }();
    return lvl;
}

template <typename... Args>
void emit(Level lvl, const char* tag, const char* fmt, Args... args) {
    if (lvl > threshold()) return;
    std::fprintf(stderr, "[%s] ", tag);
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

template <typename... Args>
void error(const char* fmt, Args... args) { emit(Level::error, "error", fmt, args...); }
template <typename... Args>
void warn(const char* fmt, Args... args) { emit(Level::warn, "warn", fmt, args...); }
template <typename... Args>
void info(const char* fmt, Args... args) { emit(Level::info, "info", fmt, args...); }
template <typename... Args>
void debug(const char* fmt, Args... args) { emit(Level::debug, "debug", fmt, args...); }

} // namespace fedmob::log
