#pragma once

#include <stdexcept>
#include <string>

namespace neco {

/// Failure categories. The numeric value doubles as the CLI exit code.
enum class ErrorKind : int {
    usage = 1,
    data = 2,
    numeric = 3,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Degenerate statistics: zero-variance buffers, std below floor, non-finite inputs.
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Throws the subclass matching `kind`.
[[noreturn]] inline void throw_error(ErrorKind kind, const std::string& what) {
    switch (kind) {
        case ErrorKind::usage: throw UsageError(what);
        case ErrorKind::numeric: throw NumericError(what);
        case ErrorKind::data: break;
    }
    throw DataError(what);
}

}  // namespace neco
