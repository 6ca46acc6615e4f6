#pragma once

#include <stdexcept>
#include <string>

namespace bathykl {

/// Base class for all library failures.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration values. CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

/// Missing or malformed input data (files, manifests). CLI exit code 3.
struct DataError : Error {
    using Error::Error;
};

// Numerical / domain failures. CLI exit code 4.
struct AngleAtBoundary : Error {
    using Error::Error;
};
struct DegenerateCloud : Error {
    using Error::Error;
};
struct EmptyCloud : Error {
    using Error::Error;
};
struct EmptySurvey : Error {
    using Error::Error;
};
struct NoCorrespondences : Error {
    using Error::Error;
};
struct InsufficientIterations : Error {
    using Error::Error;
};
struct TooManyFailures : Error {
    using Error::Error;
};
struct EmptyDataset : Error {
    using Error::Error;
};
struct NotPositiveDefinite : Error {
    using Error::Error;
};
struct NonFiniteGradient : Error {
    using Error::Error;
};
struct LengthMismatch : Error {
    using Error::Error;
};
struct NoOverlap : Error {
    using Error::Error;
};
struct SingularSystem : Error {
    using Error::Error;
};

}  // namespace bathykl
