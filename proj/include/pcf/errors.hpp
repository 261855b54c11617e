#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace pcf {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class DeterminismError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class VersionError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

}  // namespace pcf
