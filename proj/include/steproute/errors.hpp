#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace steproute {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A probability distribution that violates the TokenDistribution invariants.
class InvalidDistribution : public Error {
 public:
  using Error::Error;
};

/// Step-level metric requested over zero tokens.
class EmptyStep : public Error {
 public:
  EmptyStep() : Error("step has no tokens") {}
};

/// Raw backend data (logprob lists, scenario files, trace lines) that cannot be parsed.
class MalformedInput : public Error {
 public:
  using Error::Error;
};

class AnalysisError : public Error {
 public:
  using Error::Error;
};

/// Configuration rejected at load time. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

/// Connection, HTTP status, or response-shape failure after retries were exhausted.
class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// The backend answered without the top-k logprobs a probe needs.
class MissingLogprobs : public BackendError {
 public:
  MissingLogprobs() : BackendError("backend response carries no logprobs") {}
};

/// A token stream broke off mid-step. The tokens received so far are kept.
class StreamInterrupted : public BackendError {
 public:
  StreamInterrupted(const std::string& what, std::vector<std::string> partial)
      : BackendError(what), partial_(std::move(partial)) {}

  const std::vector<std::string>& partial_tokens() const noexcept { return partial_; }

 private:
  std::vector<std::string> partial_;
};

/// Scripted backend asked for something its scenario cannot produce.
class ScriptError : public BackendError {
 public:
  using BackendError::BackendError;
};

}  // namespace steproute
