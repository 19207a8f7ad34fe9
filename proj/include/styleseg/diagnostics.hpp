#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace styleseg {

using WarningHandler = std::function<void(std::string_view)>;

namespace detail {
struct WarningSink {
    std::mutex mutex;
    WarningHandler handler = [](std::string_view msg) { std::clog << "warning: " << msg << '\n'; };
};
inline WarningSink& warning_sink() {
    static WarningSink sink;
    return sink;
}
}  // namespace detail

/// Install a process-wide warning handler; returns the previous one.
inline WarningHandler set_warning_handler(WarningHandler handler) {
    auto& sink = detail::warning_sink();
    std::lock_guard lock(sink.mutex);
    return std::exchange(sink.handler, std::move(handler));
}

inline void warn(std::string_view message) {
    auto& sink = detail::warning_sink();
    std::lock_guard lock(sink.mutex);
    if (sink.handler) sink.handler(message);
}

/// Informational note on stderr (seed overrides, resume decisions).
inline void info(std::string_view message) { std::clog << "info: " << message << '\n'; }

/// Restores the previous handler on scope exit. Mostly for tests.
class ScopedWarningCapture {
public:
    ScopedWarningCapture()
        : previous_(set_warning_handler([this](std::string_view m) { messages.emplace_back(m); })) {}
    ~ScopedWarningCapture() { set_warning_handler(std::move(previous_)); }
    ScopedWarningCapture(const ScopedWarningCapture&) = delete;
    ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

    std::vector<std::string> messages;

private:
    WarningHandler previous_;
};

}  // namespace styleseg
