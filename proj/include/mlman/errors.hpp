#pragma once

#include <stdexcept>
#include <string>

namespace mlman {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A caller broke an operation's precondition (non-scalar backward, empty input, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Corpus / embedding / sampling failures.
class DataError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

// Training diverged (non-finite loss).
class RuntimeFailure : public Error {
public:
    using Error::Error;
};

}  // namespace mlman
