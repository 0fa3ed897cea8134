#pragma once

#include <stdexcept>
#include <string>

namespace fedmob {

// Exit codes surfaced by the CLI. Documented in the README.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config = 2,
    data = 3,
    numeric = 4,
    io = 5,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual ExitCode exit_code() const { return ExitCode::failure; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::config; }
};

class DataError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::data; }
};

class NumericError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::numeric; }
};

class IoError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::io; }
};

// Thrown when weight bundles with different layouts meet.
class IncompatibleWeightsError : public DataError {
public:
    using DataError::DataError;
};

} // namespace fedmob
