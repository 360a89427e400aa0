#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace zsg {

enum class ErrorClass {
  InvalidInput,
  ConfigError,
  PlacementError,
  GenerationError,
  ContractViolation,
  NumericError,
  IoError,
};

inline std::string_view error_class_name(ErrorClass c) {
  switch (c) {
    case ErrorClass::InvalidInput: return "invalid_input";
    case ErrorClass::ConfigError: return "config_error";
    case ErrorClass::PlacementError: return "placement_error";
    case ErrorClass::GenerationError: return "generation_error";
    case ErrorClass::ContractViolation: return "contract_violation";
    case ErrorClass::NumericError: return "numeric_error";
    case ErrorClass::IoError: return "io_error";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable class.
class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what)
      : std::runtime_error(what), cls_(cls) {}

  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

[[noreturn]] inline void fail(ErrorClass cls, const std::string& what) {
  throw Error(cls, what);
}

inline void require(bool cond, ErrorClass cls, const std::string& what) {
  if (!cond) fail(cls, what);
}

}  // namespace zsg
