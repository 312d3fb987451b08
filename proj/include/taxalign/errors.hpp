#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace taxalign {

/// Base class of every error thrown by the library.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input document. `line()` is 1-based, 0 when not line-specific.
class parse_error : public error {
public:
    parse_error(std::size_t line, const std::string& what)
        : error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class lookup_error : public error {
public:
    using error::error;
};

/// Argument outside the mathematical domain of an operation.
class domain_error : public error {
public:
    using error::error;
};

class shape_error : public error {
public:
    using error::error;
};

/// Non-finite values met during optimisation or evaluation.
class numeric_error : public error {
public:
    using error::error;
};

class benchmark_error : public error {
public:
    using error::error;
};

class config_error : public error {
public:
    using error::error;
};

class io_error : public error {
public:
    using error::error;
};

}  // namespace taxalign
