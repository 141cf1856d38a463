#include "qclt/errors.hpp"

namespace qclt {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidParameter: return "InvalidParameter";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonConvergence: return "NonConvergence";
    case ErrorKind::NonUniqueStationary: return "NonUniqueStationary";
    case ErrorKind::NotMixing: return "NotMixing";
    case ErrorKind::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::Singular: return "Singular";
    case ErrorKind::Overflow: return "Overflow";
    case ErrorKind::InvalidRange: return "InvalidRange";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::GuardExceeded: return "GuardExceeded";
    case ErrorKind::MissingPoisson: return "MissingPoisson";
    case ErrorKind::EmptyStream: return "EmptyStream";
    case ErrorKind::NotPSD: return "NotPSD";
    case ErrorKind::InsufficientReplicas: return "InsufficientReplicas";
    case ErrorKind::MissingDiagnostics: return "MissingDiagnostics";
    case ErrorKind::InsufficientPoints: return "InsufficientPoints";
    case ErrorKind::NonPositiveValue: return "NonPositiveValue";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::DegenerateSigma: return "DegenerateSigma";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ParseError: return "ParseError";
  }
  return "Unknown";
}

}  // namespace qclt
