#pragma once

#include <stdexcept>
#include <string>

namespace hecomp {

// Malformed input: bad ids, shape mismatches, misuse of a tape.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced by a computation, or a diverged training run.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values or unknown config keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Statistical routine called outside its domain.
class StatisticalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hecomp
