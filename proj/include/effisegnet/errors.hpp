#pragma once

#include <stdexcept>
#include <string>

namespace effisegnet {

// Failure classes. The CLI maps each one to a distinct exit code.
enum class ErrorClass {
  kConfig,     // bad variant, bad config key, manifest/variant mismatch
  kData,       // dataset ingestion and split resolution
  kResource,   // memory exhaustion, batch size search failure
  kNumerical,  // non-finite loss
  kContract,   // caller broke a shape or range precondition
  kLoad,       // unreadable or corrupt weights / checkpoints
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), class_(cls) {}
  ErrorClass error_class() const noexcept { return class_; }

 private:
  ErrorClass class_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorClass::kConfig, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

class ResourceError : public Error {
 public:
  explicit ResourceError(const std::string& what) : Error(ErrorClass::kResource, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorClass::kNumerical, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorClass::kContract, what) {}
};

/// Tensor shape or channel-count mismatch.
class ShapeError : public ContractError {
 public:
  explicit ShapeError(const std::string& what) : ContractError(what) {}
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error(ErrorClass::kLoad, what) {}
};

/// Process exit code for a failure class: 2 config, 3 data, 4 resource,
/// 5 numerical, 6 contract, 7 load. 1 is reserved for anything unclassified.
int exit_code(ErrorClass cls) noexcept;

}  // namespace effisegnet
