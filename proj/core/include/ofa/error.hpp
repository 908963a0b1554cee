#pragma once

#include <stdexcept>
#include <string>

namespace ofa {

// Error taxonomy. The CLI maps these onto process exit codes:
// UsageError -> 2, DataError (and subclasses) -> 3, NumericError -> 4.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed model output or token sequence (wrong kind, wrong count).
struct DecodeError : DataError {
    using DataError::DataError;
};

// Tensor/array dimension disagreement; message names both shapes.
struct ShapeError : DataError {
    using DataError::DataError;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ofa
