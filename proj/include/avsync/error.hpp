#pragma once

#include <stdexcept>
#include <string>

namespace avsync {

// Base for every error raised by the library. `kind()` is a stable
// machine-readable tag used by the command line tool.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape_mismatch"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "bad_config"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

// On-disk content disagrees with what its header or manifest declares.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

class InfeasibleTargetError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "infeasible_target"; }
};

// A metric or statistic is undefined for the given input (e.g. dB of silence).
class DomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "domain"; }
};

}  // namespace avsync
