#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace amgru {

enum class ErrorKind {
  Validation,
  NotPositiveDefinite,
  HeterogeneousParams,
  ShapeMismatch,
  NonScalarLoss,
  NonFiniteLoss,
  DivisionByZero,
  SpecMismatch,
  EmptyPositiveClass,
  ZeroReference,
  GridTooCoarse,
  SingularRegression,
  ProviderOutOfDomain,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation: return "Validation";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::HeterogeneousParams: return "HeterogeneousParams";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonScalarLoss: return "NonScalarLoss";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::DivisionByZero: return "DivisionByZero";
    case ErrorKind::SpecMismatch: return "SpecMismatch";
    case ErrorKind::EmptyPositiveClass: return "EmptyPositiveClass";
    case ErrorKind::ZeroReference: return "ZeroReference";
    case ErrorKind::GridTooCoarse: return "GridTooCoarse";
    case ErrorKind::SingularRegression: return "SingularRegression";
    case ErrorKind::ProviderOutOfDomain: return "ProviderOutOfDomain";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Invalid user input; `field` is a dotted path such as "market.rho".
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error(ErrorKind::Validation, field + ": " + message),
        field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace amgru
