#pragma once

#include <stdexcept>

namespace masf {

// Graph construction with incompatible shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Guarded op received a value outside its repaired domain.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Invalid hyperparameters, benchmark specs or CLI input.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Training hit a non-finite loss or gradient.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace masf
