#pragma once

#include <stdexcept>
#include <string>

namespace acsindy {

// Error categories map onto CLI exit codes: argument/state -> 2,
// numeric/divergence -> 3, I/O -> 4.

struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RangeError : std::range_error {
    using std::range_error::range_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace acsindy
