#pragma once
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace x3d::log {

enum class Level { Debug = 0, Info = 1, Warn = 2 };

// X3D_LOG=debug|info|warn, default info.
inline Level threshold() {
    static Level lvl = [] {
        const char* env = std::getenv("X3D_LOG");
        if (env && std::strcmp(env, "debug") == 0) return Level::Debug;
        if (env && std::strcmp(env, "warn") == 0) return Level::Warn;
        return Level::Info;
    }();
    return lvl;
}

template <typename... Args>
inline void emit(Level lvl, const char* tag, const char* fmt, Args... args) {
    if (lvl < threshold()) return;
    std::fprintf(stderr, "[x3d %s] ", tag);
    if constexpr (sizeof...(Args) == 0)
        std::fputs(fmt, stderr);
    else
        std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

template <typename... Args> inline void debug(const char* fmt, Args... args) { emit(Level::Debug, "debug", fmt, args...); }
template <typename... Args> inline void info(const char* fmt, Args... args) { emit(Level::Info, "info", fmt, args...); }
template <typename... Args> inline void warn(const char* fmt, Args... args) { emit(Level::Warn, "warn", fmt, args...); }

} // namespace x3d::log
