#pragma once

#include <stdexcept>
#include <string>

namespace carmm {

// All library failures derive from carmm::Error so callers can catch one type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// Input is well-formed but carries no information (zero variance, constant chains).
class DegenerateInput : public Error {
public:
    using Error::Error;
};

class NumericDomainError : public Error {
public:
    using Error::Error;
};

// Matrix is not positive definite or not invertible.
class FactorizationError : public Error {
public:
    using Error::Error;
};

// The requested quantity is not identified for these dimensions (e.g. m < n).
class NotIdentifiable : public Error {
public:
    using Error::Error;
};

class SimulationFailure : public Error {
public:
    using Error::Error;
};

class SamplerFailure : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& msg)
{
    if (!cond) throw InvalidArgument(msg);
}

} // namespace detail
} // namespace carmm
