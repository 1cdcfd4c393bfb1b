#pragma once

#include <atomic>
#include <iostream>
#include <string>

namespace vpn {

inline std::atomic<bool>& warnings_enabled() {
    static std::atomic<bool> enabled{true};
    return enabled;
}

inline std::atomic<std::size_t>& warning_count() {
    static std::atomic<std::size_t> count{0};
    return count;
}

inline void warn(const std::string& msg) {
    ++warning_count();
    if (warnings_enabled()) std::cerr << "warning: " << msg << '\n';
}

}  // namespace vpn
