#pragma once

#include <stdexcept>
#include <string>

namespace herbert {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 2; argument parsing problems are reported separately.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad configuration: invalid sizes, duplicate names, unknown keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// File system failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed input records or files.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Tensor shape disagreement.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace herbert
