#pragma once
// Error taxonomy. The CLI maps these onto distinct exit codes.

#include <stdexcept>
#include <string>

namespace kd {

// Shape/dimension mismatch between tensors.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Violated operation precondition (non-scalar backward root, bad index, ...).
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad or incomplete run configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / stream failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// IDX file with a wrong magic number.
struct IdxFormatError : IoError {
    using IoError::IoError;
};

// IDX image/label files whose sample counts disagree.
struct IdxConsistencyError : IoError {
    using IoError::IoError;
};

// IDX file shorter than its header promises.
struct IdxLengthError : IoError {
    using IoError::IoError;
};

}  // namespace kd
