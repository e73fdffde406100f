#pragma once

#include <stdexcept>
#include <string>

namespace affkit {

/// Input or argument that violates an operation's contract.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File system or decode failure. Messages always carry the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace affkit
