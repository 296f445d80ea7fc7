#pragma once

#include <stdexcept>
#include <string>

namespace refilter {

// Error categories. The CLI maps these onto exit codes (usage=1, data=2, numeric=3).
enum class ErrorKind {
  kDimension,
  kIndex,
  kConfig,
  kData,
  kParse,
  kNumeric,
  kTraining,
  kCache,
  kFile,
  kIncompatible,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& w) : Error(ErrorKind::kDimension, w) {}
};
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& w) : Error(ErrorKind::kIndex, w) {}
};
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfig, w) {}
};
class DataError : public Error {
 public:
  explicit DataError(const std::string& w) : Error(ErrorKind::kData, w) {}
};
class ParseError : public Error {
 public:
  ParseError(const std::string& w, std::size_t line)
      : Error(ErrorKind::kParse, "line " + std::to_string(line) + ": " + w), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& w) : Error(ErrorKind::kNumeric, w) {}
};
class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& w) : Error(ErrorKind::kTraining, w) {}
};
class CacheError : public Error {
 public:
  explicit CacheError(const std::string& w) : Error(ErrorKind::kCache, w) {}
};
class FileError : public Error {
 public:
  explicit FileError(const std::string& w) : Error(ErrorKind::kFile, w) {}
};
class IncompatibleError : public Error {
 public:
  explicit IncompatibleError(const std::string& w) : Error(ErrorKind::kIncompatible, w) {}
};

}  // namespace refilter
