#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rvisa {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Malformed input line in a JSONL artifact.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A record that parsed but breaks a domain invariant.
class ValidationError : public Error {
 public:
  ValidationError(std::string id, const std::string& what)
      : Error("example '" + id + "': " + what), id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Transport failure that survived every retry.
class GatewayError : public Error {
 public:
  GatewayError(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// Backend declined to answer; the raw payload is kept for inspection.
class RefusalError : public Error {
 public:
  RefusalError(const std::string& what, std::string payload)
      : Error(what), payload_(std::move(payload)) {}
  const std::string& payload() const noexcept { return payload_; }

 private:
  std::string payload_;
};

class AssemblyError : public Error {
 public:
  AssemblyError(const std::string& what, std::vector<std::string> ids)
      : Error(what), ids_(std::move(ids)) {}
  const std::vector<std::string>& missing_ids() const noexcept { return ids_; }

 private:
  std::vector<std::string> ids_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step, std::vector<std::string> batch_ids)
      : Error(what), step_(step), batch_ids_(std::move(batch_ids)) {}
  long step() const noexcept { return step_; }
  const std::vector<std::string>& batch_ids() const noexcept { return batch_ids_; }

 private:
  long step_;
  std::vector<std::string> batch_ids_;
};

class InferenceError : public Error {
 public:
  InferenceError(const std::string& what, std::string id)
      : Error(what), id_(std::move(id)) {}
  const std::string& example_id() const noexcept { return id_; }

 private:
  std::string id_;
};

}  // namespace rvisa
