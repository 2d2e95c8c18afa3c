#pragma once

#include <stdexcept>
#include <string>

namespace cfdbal {

// Invalid user input: bad configuration, malformed data, violated preconditions.
// Maps to CLI exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Computation failed or degenerated: solver divergence, weak instrument,
// degenerate resampling. Maps to CLI exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cfdbal
