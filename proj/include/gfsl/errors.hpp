#pragma once

#include <stdexcept>
#include <string>

namespace gfsl {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible matrix/vector dimensions. Message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Malformed input file (message carries the line number).
struct ParseError : Error {
    using Error::Error;
};

/// A dataset or record violates a structural rule.
struct ValidationError : Error {
    using Error::Error;
};

/// Not enough classes/instances to satisfy a sampling request.
struct CapacityError : Error {
    using Error::Error;
};

/// Bad run configuration (unknown field, missing seed, bad path).
struct ConfigError : Error {
    using Error::Error;
};

/// Numeric failure: NaN/Inf guard tripped or a degenerate norm.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace gfsl
