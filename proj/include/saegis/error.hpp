#pragma once

#include <stdexcept>
#include <string>

namespace saegis {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data, failed validation, I/O failure or a violated precondition.
class DataError : public Error {
public:
    using Error::Error;
};

/// Numeric breakdown inside an algorithm (non-finite loss, degenerate norm).
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace saegis
