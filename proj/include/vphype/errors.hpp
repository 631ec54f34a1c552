#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace vphype {

// Base error. what() is always a single line of the form "<category>: <message>"
// so the CLI can forward it verbatim to stderr.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(category + ": " + message), category_(std::move(category)) {}

  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("shape", msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error("state", msg) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract", msg) {}
};

class TaskIdError : public Error {
 public:
  explicit TaskIdError(const std::string& msg) : Error("task", msg) {}
};

class LabelError : public Error {
 public:
  explicit LabelError(const std::string& msg) : Error("label", msg) {}
};

class SplitError : public Error {
 public:
  explicit SplitError(const std::string& msg) : Error("split", msg) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& msg) : Error("checkpoint", msg) {}
};

class EvalError : public Error {
 public:
  explicit EvalError(const std::string& msg) : Error("eval", msg) {}
};

class TrainError : public Error {
 public:
  explicit TrainError(const std::string& msg) : Error("train", msg) {}
};

}  // namespace vphype
