#pragma once

#include <stdexcept>
#include <string>

namespace ecgrobust {

// Invalid argument values, shapes, or configuration.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or unusable input data (files, records, degenerate batches).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where the computation requires finite ones.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ecgrobust
