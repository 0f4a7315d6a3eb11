#pragma once

#include <stdexcept>
#include <string>

namespace mexit {

/// Invalid user-supplied configuration, shapes or arguments.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed, truncated or incompatible files.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Broken internal contract, e.g. a backward call with a foreign cache.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training diverged (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mexit
