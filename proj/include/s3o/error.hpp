#pragma once

#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace s3o {

enum class ErrorCode {
  InvalidArgument,
  BehindCamera,
  EmptyMask,
  MultipleComponents,
  DegenerateExtent,
  EmptyGraph,
  InvalidPairs,
  DimensionMismatch,
  SingularBlend,
  NotNormalized,
  TopologyMismatch,
  PartCountMismatch,
  InvalidSkeleton,
  InvalidMesh,
  Io,
  Parse,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::MultipleComponents: return "MultipleComponents";
    case ErrorCode::DegenerateExtent: return "DegenerateExtent";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::InvalidPairs: return "InvalidPairs";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::SingularBlend: return "SingularBlend";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::TopologyMismatch: return "TopologyMismatch";
    case ErrorCode::PartCountMismatch: return "PartCountMismatch";
    case ErrorCode::InvalidSkeleton: return "InvalidSkeleton";
    case ErrorCode::InvalidMesh: return "InvalidMesh";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Parse: return "Parse";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // I/O and parse failures are data errors; everything else is a contract violation.
  bool is_data_error() const noexcept {
    return code_ != ErrorCode::InvalidArgument;
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

// Diagnostics go to stderr; verbosity 0 silences warnings.
inline int& log_verbosity() {
  static int level = 1;
  return level;
}

inline void warn(const std::string& msg) {
  if (log_verbosity() > 0) std::cerr << "warning: " << msg << '\n';
}

inline void info(const std::string& msg) {
  if (log_verbosity() > 1) std::cerr << msg << '\n';
}

}  // namespace s3o
