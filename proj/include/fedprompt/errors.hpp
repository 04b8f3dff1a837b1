#pragma once

#include <stdexcept>
#include <string>

namespace fedprompt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Out-of-domain scalar hyperparameter (non-positive temperature, beta, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Input whose norm is too small to normalize.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Object used in a state that violates a precondition (missing gradient, wrong tape).
class StateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

/// Federated message that breaks the exchange rules (duplicate upload, owner slot echoed back).
class ProtocolError : public Error {
public:
    using Error::Error;
};

}  // namespace fedprompt
