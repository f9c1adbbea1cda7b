#pragma once

#include <stdexcept>
#include <string>

namespace smart {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy. Every failure mode surfaces as one of these so the CLI can
// map them to exit codes and callers can test for the specific kind.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct PlacementError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace smart
