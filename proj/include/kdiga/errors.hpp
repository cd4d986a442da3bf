#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kdiga {

enum class ErrorKind {
    invalid_input,
    invalid_config,
    index,
    unsupported,
    invalid_call,
    parse,
    integrity,
    non_finite,
    io,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::invalid_input: return "invalid-input";
        case ErrorKind::invalid_config: return "invalid-config";
        case ErrorKind::index: return "index";
        case ErrorKind::unsupported: return "unsupported-capability";
        case ErrorKind::invalid_call: return "invalid-call";
        case ErrorKind::parse: return "parse";
        case ErrorKind::integrity: return "integrity";
        case ErrorKind::non_finite: return "non-finite";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace kdiga
