#pragma once

#include <stdexcept>
#include <string>

namespace mid {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, unreadable or corrupt dataset files.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& file, const std::string& what)
      : Error(file + ": " + what), file_(file) {}
  const std::string& file() const noexcept { return file_; }

 private:
  std::string file_;
};

/// Tensor shapes or dimensions that do not match a contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the documented domain of an operation.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, gradient or objective. `stage` names where it appeared.
class NumericError : public Error {
 public:
  NumericError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Configuration schema violation; `line` is 1-based, 0 when unknown.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, int line, const std::string& what)
      : Error(format(key, line, what)), key_(std::move(key)), line_(line) {}
  const std::string& key() const noexcept { return key_; }
  int line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& key, int line, const std::string& what) {
    std::string out = "config";
    if (line > 0) out += ":" + std::to_string(line);
    if (!key.empty()) out += " '" + key + "'";
    return out + ": " + what;
  }
  std::string key_;
  int line_;
};

}  // namespace mid
