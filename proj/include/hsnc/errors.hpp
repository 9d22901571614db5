#pragma once

#include <stdexcept>
#include <string>

namespace hsnc {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid module configuration (bad hyperparameters, indivisible groups, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Tensor shape mismatch; the message names the offending axis.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent data (channel mismatch, degenerate fits, ...).
class DataError : public Error {
public:
    using Error::Error;
};

// Input outside the mathematical domain of a transform.
class DomainError : public Error {
public:
    using Error::Error;
};

// Corrupt or truncated file; the message carries a byte offset where known.
class FormatError : public Error {
public:
    using Error::Error;
};

// Caller misuse of an API (empty buffer, non-scalar loss, duplicate ids, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

// Non-finite state detected during optimization.
class TrainingFault : public Error {
public:
    using Error::Error;
};

// Requested metric is undefined for the given inputs.
class MetricError : public Error {
public:
    using Error::Error;
};

} // namespace hsnc
