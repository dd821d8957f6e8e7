#pragma once

#include <stdexcept>
#include <string>

namespace geofuse {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced or consumed by a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every sampled pixel of a mini-batch carried an ignored label.
class EmptyBatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace geofuse
