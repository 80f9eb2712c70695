#pragma once

#include <stdexcept>
#include <string>

namespace misfitlab {

// Error taxonomy. The CLI maps ConfigError to exit code 2, DataError (and its
// subclasses) to 3, everything else to 4.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed corpus / cache / weight file. `path` is a JSON pointer or file path.
class ParseError : public DataError {
 public:
  ParseError(const std::string& path, const std::string& what)
      : DataError(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// An outfit references a garment id that does not resolve.
class ReferentialError : public DataError {
 public:
  explicit ReferentialError(const std::string& id)
      : DataError("dangling garment id '" + id + "'"), id_(id) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class LookupError : public DataError {
 public:
  using DataError::DataError;
};

/// Shape mismatch between operands.
class DimensionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace misfitlab
