#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace siglass {

enum class ErrorKind {
  MalformedDocument,
  UnsupportedOperator,
  CyclicGraph,
  ShapeMismatch,
  NonFiniteActivation,
  InternalInconsistency,
  EmptyRoi,
  FullRoi,
  EmptyNeighborhood,
  DegenerateNormalization,
  ObservationOutsideRegion,
  ZeroDenominator,
  SingularCovariance,
  StalledSearch,
  InvalidSpec,
  InvalidConfig,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedDocument: return "MalformedDocument";
    case ErrorKind::UnsupportedOperator: return "UnsupportedOperator";
    case ErrorKind::CyclicGraph: return "CyclicGraph";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorKind::InternalInconsistency: return "InternalInconsistency";
    case ErrorKind::EmptyRoi: return "EmptyRoi";
    case ErrorKind::FullRoi: return "FullRoi";
    case ErrorKind::EmptyNeighborhood: return "EmptyNeighborhood";
    case ErrorKind::DegenerateNormalization: return "DegenerateNormalization";
    case ErrorKind::ObservationOutsideRegion: return "ObservationOutsideRegion";
    case ErrorKind::ZeroDenominator: return "ZeroDenominator";
    case ErrorKind::SingularCovariance: return "SingularCovariance";
    case ErrorKind::StalledSearch: return "StalledSearch";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

/// Degenerate-hypothesis errors: the observed ROI (or one of the regions
/// derived from it) leaves the test direction undefined. Simulation drivers
/// count these separately from genuine failures.
inline bool is_degenerate(ErrorKind kind) {
  return kind == ErrorKind::EmptyRoi || kind == ErrorKind::FullRoi ||
         kind == ErrorKind::EmptyNeighborhood ||
         kind == ErrorKind::DegenerateNormalization;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::vector<std::string> subjects = {})
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        subjects_(std::move(subjects)) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// Names the error is about (offending nodes, edges, paths).
  const std::vector<std::string>& subjects() const noexcept { return subjects_; }

 private:
  ErrorKind kind_;
  std::vector<std::string> subjects_;
};

}  // namespace siglass
