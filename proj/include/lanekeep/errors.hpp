#pragma once

#include <stdexcept>
#include <string>

namespace lanekeep {

// Invalid configuration or malformed input. CLI exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller violated an operation's precondition (bad argument, wrong count,
// stepping a finished episode). CLI exit code 2.
struct ContractError : ConfigError {
    using ConfigError::ConfigError;
};

// Tensor shape mismatch; message names both shapes.
struct ShapeError : ContractError {
    using ContractError::ContractError;
};

// Missing or incompatible prerequisite artifact (checkpoint, dataset).
// CLI exit code 3.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure: non-finite values, factorization breakdown.
// CLI exit code 4.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss during an optimization run; carries the step index.
struct TrainingError : NumericalError {
    TrainingError(const std::string& what, long step)
        : NumericalError(what + " (step " + std::to_string(step) + ")"), step_index(step) {}
    long step_index;
};

}  // namespace lanekeep
