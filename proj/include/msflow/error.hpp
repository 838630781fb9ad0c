#pragma once

#include <stdexcept>
#include <string>

namespace msflow {

/// Root of every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor dimensions that do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced or consumed where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values or keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Inconsistent or missing input data (manifests, records, masks).
class DataError : public Error {
public:
    using Error::Error;
};

/// Malformed TensorFile / image file contents.
class FormatError : public DataError {
public:
    enum class Kind { io, bad_magic, bad_version, unsupported_dtype, truncated, bad_header };

    FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace msflow
