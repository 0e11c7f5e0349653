#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stabkit {

/// Base of every exception thrown by the library. `category()` is the short
/// machine-parsable tag the CLI prints as `error: <category>: <detail>`.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& detail)
        : std::runtime_error(detail), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& detail) : Error("invalid-argument", detail) {}
};

class SizeLimit : public Error {
public:
    explicit SizeLimit(const std::string& detail) : Error("size-limit", detail) {}
};

class FactorizationFailure : public Error {
public:
    FactorizationFailure(std::size_t pivot, const std::string& detail)
        : Error("factorization-failure",
                detail + " (pivot " + std::to_string(pivot) + ")"),
          pivot_(pivot) {}

    std::size_t pivot() const noexcept { return pivot_; }

private:
    std::size_t pivot_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& detail) : Error("config", detail) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& detail) : Error("io", detail) {}
};

}  // namespace stabkit
