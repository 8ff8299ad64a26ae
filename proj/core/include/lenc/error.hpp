#pragma once

#include <stdexcept>
#include <string>

namespace lenc {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Bad argument: dimension mismatch, non-positive temperature, empty input.
class InvalidArgument : public Error {
public:
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
class DivergenceError : public Error {
public:
  using Error::Error;
};

// Malformed snapshot, envelope or checkpoint. `field` names the first
// offending field.
class ValidationError : public Error {
public:
  ValidationError(std::string field, const std::string& what)
      : Error("invalid " + field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

class ScoringError : public Error {
public:
  using Error::Error;
};

class RoutingError : public Error {
public:
  using Error::Error;
};

// A node with no decision heads was asked to predict.
class NoKnowledgeError : public Error {
public:
  using Error::Error;
};

// Transfer policy not applicable to this student/teacher pair.
class PolicyError : public Error {
public:
  using Error::Error;
};

class NoPeersError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

}  // namespace lenc
