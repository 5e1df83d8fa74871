#pragma once

#include <stdexcept>
#include <string>

namespace ccn {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

struct DegenerateDepth : Error {
    using Error::Error;
};

struct NonScalarLoss : Error {
    using Error::Error;
};

struct MissingGradient : Error {
    using Error::Error;
};

struct NoMatches : Error {
    using Error::Error;
};

struct InsufficientMatches : Error {
    using Error::Error;
};

struct NoConsensus : Error {
    using Error::Error;
};

struct DegenerateConfiguration : Error {
    using Error::Error;
};

struct EmptyTargetCloud : Error {
    using Error::Error;
};

struct PlacementFailure : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

}  // namespace ccn
