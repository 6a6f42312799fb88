#pragma once

#include <stdexcept>
#include <string>

namespace layermatch {

/// Base of every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite value appeared where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Operation called in the wrong state (missing forward cache, wrong policy kind).
class StateError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (IDX, checkpoint, CSV).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Bad configuration key or value. `key()` names the offending key.
class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& message)
        : Error(message), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

} // namespace layermatch
