#pragma once

#include <stdexcept>
#include <string>

namespace demondnc {

// Shape / dimension mismatches between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Input outside an operation's mathematical domain (log of nonpositive, |rho| >= 1, ...).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

// Invalid argument values (empty batch, mismatched counts, ...).
struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& msg) : std::runtime_error("argument error: " + msg) {}
};

// Inconsistent or invalid configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// A computation produced NaN or Inf.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Malformed input file; message carries file/line location.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error("parse error: " + msg) {}
};

// Filesystem / serialization failures; message carries the path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace demondnc
