#pragma once

#include <stdexcept>
#include <string>

namespace seqflow {

// Error taxonomy. The CLI maps these onto its exit codes; library code and
// tests catch them by category.

// Caller broke a documented precondition (bad shapes, wrong argument).
class UsageError : public std::invalid_argument {
public:
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A numeric result left the finite domain (NaN/Inf) or a linear solve failed.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input data (corpus files, piano rolls, stochastic matrices).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// A structural invariant that should be unreachable fired (e.g. the NLSq
// cubic reporting three real roots, which signals corrupted parameters).
class InvariantViolation : public std::runtime_error {
public:
    explicit InvariantViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Object used before it holds the required state (e.g. sampling lengths from
// an empty length model).
class StateError : public std::runtime_error {
public:
    explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

// Sequence length outside the supported [1, L_max] window.
class LengthError : public std::runtime_error {
public:
    explicit LengthError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace seqflow
