#pragma once

#include <stdexcept>
#include <string>

namespace hfloc {

enum class ErrorCode {
  kInvalidArgument,
  kZeroVector,
  kDimensionMismatch,
  kDegenerateConfiguration,
  kTooFewCorrespondences,
  kMissingPose,
  kMissingCamera,
  kMissingFeatures,
  kUnknownImage,
  kEmptyMap,
  kEmptyIndex,
  kEmptyPlace,
  kVersionMismatch,
  kCorruptFile,
  kIoError,
  kParseError,
  kNoVisiblePoints,
  kNoVisibleKeypoints,
  kMissingGroundTruth,
  kShapeMismatch,
  kNonSimplexTarget,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kDegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::kTooFewCorrespondences: return "TooFewCorrespondences";
    case ErrorCode::kMissingPose: return "MissingPose";
    case ErrorCode::kMissingCamera: return "MissingCamera";
    case ErrorCode::kMissingFeatures: return "MissingFeatures";
    case ErrorCode::kUnknownImage: return "UnknownImage";
    case ErrorCode::kEmptyMap: return "EmptyMap";
    case ErrorCode::kEmptyIndex: return "EmptyIndex";
    case ErrorCode::kEmptyPlace: return "EmptyPlace";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kNoVisiblePoints: return "NoVisiblePoints";
    case ErrorCode::kNoVisibleKeypoints: return "NoVisibleKeypoints";
    case ErrorCode::kMissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonSimplexTarget: return "NonSimplexTarget";
  }
  return "Unknown";
}

// Single exception type for contract violations and unusable inputs.
// Expected outcomes (a point behind the camera, a degenerate triangulation)
// are reported through return values instead, so callers only ever need
// try/catch at module boundaries.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void throw_error(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace hfloc
