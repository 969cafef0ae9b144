// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace routelab {

// Invalid argument values, dimension mismatches, out-of-range indices.
class DomainError : public std::invalid_argument {
public:
    explicit DomainError(const std::string& what) : std::invalid_argument(what) {}
};

// Inputs that exceed a structural capacity (sequence length, vocab range).
class CapacityError : public std::runtime_error {
public:
    explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite loss encountered while training; carries the failing step.
class TrainingDivergedError : public std::runtime_error {
public:
    TrainingDivergedError(const std::string& what, int step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

// Candidate search produced no finite objective value.
class OptimizationError : public std::runtime_error {
public:
    explicit OptimizationError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace routelab
