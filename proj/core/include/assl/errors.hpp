#pragma once

#include <stdexcept>
#include <string>

namespace assl {

/// Bad configuration, bad input files, bad CLI arguments. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A pipeline stage was requested before its upstream stages completed,
/// or upstream artifacts were produced under a different config. Exit code 3.
class StageError : public std::runtime_error {
public:
    explicit StageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// External HTTP service failed past the retry budget. Exit code 4.
class ServiceError : public std::runtime_error {
public:
    explicit ServiceError(const std::string& msg) : std::runtime_error(msg) {}
};

/// The service answered, but with a malformed or inconsistent response.
class ProtocolError : public ServiceError {
public:
    explicit ProtocolError(const std::string& msg) : ServiceError(msg) {}
};

} // namespace assl
