#pragma once

#include <stdexcept>
#include <string>

namespace ucan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or channel mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Vector too short to normalize.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// Class index outside [0, CL).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation precondition (frozen model, bad root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Empty or malformed dataset, single-class score set, etc.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Iterative solver hit its cap before reaching tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// A required artifact could not be found on disk.
class ResolutionError : public Error {
 public:
  ResolutionError(const std::string& what, std::string artifact)
      : Error(what), artifact_(std::move(artifact)) {}
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string artifact_;
};

// Container / file-format errors.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};
class CorruptRecordError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace ucan
