#pragma once

#include <stdexcept>
#include <string>

namespace loclab {

// Base of every error raised by the library. Subclasses name the failure
// category so callers (and the CLI) can report it without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string &what, long step) : Error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

class InsufficientUnlearningError : public Error {
public:
    InsufficientUnlearningError(const std::string &what, double min_mu, double max_mu)
        : Error(what), min_mu_(min_mu), max_mu_(max_mu) {}
    double min_mu() const { return min_mu_; }
    double max_mu() const { return max_mu_; }

private:
    double min_mu_;
    double max_mu_;
};

class InstabilityError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace loclab
