#pragma once

#include <stdexcept>
#include <string>

namespace etg {

// Bad inputs, malformed files, contract violations. CLI maps this to exit 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, divergence, failed numeric checks. CLI maps this to exit 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace etg
