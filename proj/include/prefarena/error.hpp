#pragma once

#include <stdexcept>
#include <string>

namespace prefarena {

// Base class for every error raised by the library. Subclasses exist only
// where callers need to tell failure kinds apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::string source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what),
        source_(std::move(source)),
        line_(line) {}

  const std::string& source() const { return source_; }
  std::size_t line() const { return line_; }

 private:
  std::string source_;
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class DuplicateKeyError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Bradley-Terry fit failures.
class FitError : public Error {
 public:
  using Error::Error;
};

class DisconnectedGraphError : public FitError {
 public:
  using FitError::FitError;
};

class DivergenceError : public FitError {
 public:
  using FitError::FitError;
};

class NoObservationsError : public FitError {
 public:
  using FitError::FitError;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Annotation-service request failures. `code` is the HTTP status the
// service layer reports for it.
class ServiceError : public Error {
 public:
  ServiceError(int code, const std::string& what) : Error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

}  // namespace prefarena
