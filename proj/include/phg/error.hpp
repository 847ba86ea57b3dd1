#pragma once

#include <stdexcept>
#include <string>

namespace phg {

// Malformed or missing data: bad files, shape mismatches, missing modalities.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A computation produced a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace phg
