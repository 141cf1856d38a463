#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qclt {

enum class ErrorKind {
  InvalidParameter,
  DimensionMismatch,
  NonConvergence,
  NonUniqueStationary,
  NotMixing,
  DegenerateSpectrum,
  SingularSystem,
  Singular,
  Overflow,
  InvalidRange,
  IndexOutOfRange,
  GuardExceeded,
  MissingPoisson,
  EmptyStream,
  NotPSD,
  InsufficientReplicas,
  MissingDiagnostics,
  InsufficientPoints,
  NonPositiveValue,
  InvalidSpec,
  DegenerateSigma,
  ConfigError,
  IoError,
  ParseError,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (and the CLI
// exit-code mapping) can branch on it without parsing messages.
class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace qclt
