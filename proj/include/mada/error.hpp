#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace mada {

// Exit-code classes used by the CLI: config = 2, data = 3, numerical = 4.

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}

    [[nodiscard]] const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised by mCE / RmCE when a ratio has a zero denominator.
class UndefinedMetricError : public std::domain_error {
public:
    UndefinedMetricError(std::string corruption, const std::string& message)
        : std::domain_error(corruption + ": " + message), corruption_(std::move(corruption)) {}

    [[nodiscard]] const std::string& corruption() const noexcept { return corruption_; }

private:
    std::string corruption_;
};

}  // namespace mada
