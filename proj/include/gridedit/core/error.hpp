#pragma once

#include <stdexcept>
#include <string>

namespace gridedit {

// Every failure raised by the library derives from Error. The CLI maps the
// concrete type onto a process exit code (see exit_code()).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class VersionError : public Error {
public:
    using Error::Error;
};

enum ExitCode : int {
    kExitOk         = 0,
    kExitUsage      = 1,
    kExitValidation = 2,
    kExitIo         = 3,
    kExitNumerical  = 4,
    kExitVersion    = 5,
};

inline int exit_code(const std::exception& e) {
    if (dynamic_cast<const IoError*>(&e)) return kExitIo;
    if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
    if (dynamic_cast<const VersionError*>(&e)) return kExitVersion;
    if (dynamic_cast<const Error*>(&e)) return kExitValidation;
    return kExitUsage;
}

// Rethrows `e` with `prefix` prepended, keeping its concrete type.
[[noreturn]] inline void rethrow_with_context(const std::exception& e, const std::string& prefix) {
    const std::string msg = prefix + ": " + e.what();
    if (dynamic_cast<const ShapeError*>(&e)) throw ShapeError(msg);
    if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
    if (dynamic_cast<const ValidationError*>(&e)) throw ValidationError(msg);
    if (dynamic_cast<const IoError*>(&e)) throw IoError(msg);
    if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(msg);
    if (dynamic_cast<const VersionError*>(&e)) throw VersionError(msg);
    if (dynamic_cast<const Error*>(&e)) throw Error(msg);
    throw std::runtime_error(msg);
}

}  // namespace gridedit
