#pragma once

#include <stdexcept>
#include <string>

namespace msdu {

// Base for every error thrown by the library. Callers that only care about
// "something in msdu failed" can catch this one.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dilation rate below 1.
class InvalidRateError : public Error {
 public:
  using Error::Error;
};

// Kernel geometry that breaks the odd-size / finite-weight invariants.
class InvalidKernelError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Inconsistent model, schedule, or run configuration. The message names the
// violated invariant or the offending key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint that cannot be decoded or does not match its embedded config.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace msdu
