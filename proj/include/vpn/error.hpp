#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace vpn {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Input shapes do not satisfy an operation's shape rule.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value became NaN or infinite.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Malformed file, manifest, or configuration.
class FormatError : public Error {
public:
    using Error::Error;
};

namespace detail {

template <typename... Parts>
std::string concat(Parts&&... parts) {
    std::ostringstream os;
    (os << ... << std::forward<Parts>(parts));
    return os.str();
}

template <typename E = Error, typename... Parts>
inline void require(bool cond, Parts&&... parts) {
    if (!cond) throw E(concat(std::forward<Parts>(parts)...));
}

}  // namespace detail
}  // namespace vpn
