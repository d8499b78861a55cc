#pragma once

#include <stdexcept>
#include <string>

namespace revtrain {

// Incompatible tensor shapes or layer/channel mismatches.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An operation was called in the wrong state (e.g. an inverse before any
// forward populated the cached batch statistics).
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user configuration: architecture files, modes, CLI flags.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of a formula.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files (dataset, checkpoint).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Monte-Carlo measurement could not be formed (e.g. zero signal energy).
class MeasurementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace revtrain
