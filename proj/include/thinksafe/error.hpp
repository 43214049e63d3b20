#pragma once

#include <stdexcept>
#include <string>

namespace thinksafe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text (a line that does not parse, a bad header).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that violates a record or dataset invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(what + ": " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Generation or guard backend failure (transport, protocol, retries exhausted).
class BackendError : public Error {
 public:
  using Error::Error;
};

// The backend cannot provide a capability the caller needs (e.g. logprobs).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

// Caller broke an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace thinksafe
