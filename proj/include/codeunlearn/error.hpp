#pragma once

#include <stdexcept>
#include <string>

namespace cu {

// Stable error categories. The C API maps each one onto a status code.
enum class ErrorKind {
  Dimension,
  Index,
  State,
  Capacity,
  Config,
  Numeric,
  Contract,
  Length,
  Training,
  Format,
  Io,
  UnknownTopic,
  MissingBaseline,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& w) : Error(ErrorKind::Dimension, w) {}
};
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& w) : Error(ErrorKind::Index, w) {}
};
class StateError : public Error {
 public:
  explicit StateError(const std::string& w) : Error(ErrorKind::State, w) {}
};
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& w) : Error(ErrorKind::Capacity, w) {}
};
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& w) : Error(ErrorKind::Numeric, w) {}
};
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& w) : Error(ErrorKind::Contract, w) {}
};
class LengthError : public Error {
 public:
  explicit LengthError(const std::string& w) : Error(ErrorKind::Length, w) {}
};
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& w) : Error(ErrorKind::Format, w) {}
};
class IoError : public Error {
 public:
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};

class UnknownTopicError : public Error {
 public:
  explicit UnknownTopicError(const std::string& w) : Error(ErrorKind::UnknownTopic, w) {}
};
class MissingBaselineError : public Error {
 public:
  explicit MissingBaselineError(const std::string& w) : Error(ErrorKind::MissingBaseline, w) {}
};

}  // namespace cu
