#pragma once

#include <stdexcept>

namespace despeckle {

/// Unreadable, malformed or inconsistent input data (files, manifests, checkpoints).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values or divergence during a numeric computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace despeckle
