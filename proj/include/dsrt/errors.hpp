// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dsrt {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad or inconsistent configuration / malformed input documents. CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// A required artifact (checkpoint, dataset, run directory) is missing. CLI exit code 3.
struct PrereqError : Error {
    using Error::Error;
};

// NaN/Inf or a violated numeric contract. Never a silent value. CLI exit code 4.
struct NumericError : Error {
    using Error::Error;
};

// Operand shapes incompatible; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Corrupt or truncated files; message carries the byte offset where parsing failed.
struct IoError : Error {
    using Error::Error;
};

}  // namespace dsrt
