#pragma once

#include <stdexcept>
#include <string>

namespace fedstock {

// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/parameter shape disagreements. Message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range lookups (embedding rows, category indices).
struct IndexError : Error {
    using Error::Error;
};

// NaN/Inf encountered in a forward or backward pass.
struct NumericError : Error {
    using Error::Error;
};

// Invalid experiment or module configuration. `field` is the config path
// that failed validation (e.g. "training.rounds").
struct ConfigError : Error {
    std::string field;
    ConfigError(std::string field_path, const std::string& what)
        : Error(field_path.empty() ? what : field_path + ": " + what),
          field(std::move(field_path)) {}
};

// Structural mismatch between parameter sets during aggregation.
struct ProtocolError : Error {
    using Error::Error;
};

// Local training produced a non-finite loss.
struct TrainingDivergence : Error {
    int client_id;
    int epoch;
    TrainingDivergence(int client, int at_epoch, const std::string& what)
        : Error(what), client_id(client), epoch(at_epoch) {}
};

// Malformed arguments that are not config-file driven (empty lists etc).
struct ArgumentError : Error {
    using Error::Error;
};

// Dataset / checkpoint file problems.
struct IoError : Error {
    using Error::Error;
};

}  // namespace fedstock
