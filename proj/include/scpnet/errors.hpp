#pragma once

#include <stdexcept>
#include <string>

namespace scpnet {

// Base of every error thrown by the library. Callers that only care about
// "did the pipeline fail" catch this; the subclasses name the failing kind.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Zero-norm vectors and all-zero softmax rows.
class DegenerateError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

// Non-finite values, failed finite-difference probes, NaN losses.
class NumericError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
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

} // namespace scpnet
