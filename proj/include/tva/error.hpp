#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tva {

// Every failure the library can raise. The numeric values double as the CLI
// exit codes (see tools/tva.cpp), so they must stay unique and stable.
enum class ErrorCode : int {
  Usage = 2,
  Io = 3,
  UnsupportedClass = 10,
  NoExecutableSegment = 11,
  MalformedHeaders = 12,
  InvalidEntryPoint = 20,
  RegionMismatch = 21,
  Overflow = 30,
  UnmappedDirectTarget = 31,
  SizeDivergence = 32,
  UnsupportedOperand = 33,
  InvalidStubTemplate = 34,
  LayoutCollision = 40,
  RelocationConflict = 41,
  NotSupported = 42,
  ParseFailure = 50,  // verify / run-diff could not parse one of their inputs
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Usage: return "Usage";
    case ErrorCode::Io: return "Io";
    case ErrorCode::UnsupportedClass: return "UnsupportedClass";
    case ErrorCode::NoExecutableSegment: return "NoExecutableSegment";
    case ErrorCode::MalformedHeaders: return "MalformedHeaders";
    case ErrorCode::InvalidEntryPoint: return "InvalidEntryPoint";
    case ErrorCode::RegionMismatch: return "RegionMismatch";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::UnmappedDirectTarget: return "UnmappedDirectTarget";
    case ErrorCode::SizeDivergence: return "SizeDivergence";
    case ErrorCode::UnsupportedOperand: return "UnsupportedOperand";
    case ErrorCode::InvalidStubTemplate: return "InvalidStubTemplate";
    case ErrorCode::LayoutCollision: return "LayoutCollision";
    case ErrorCode::RelocationConflict: return "RelocationConflict";
    case ErrorCode::NotSupported: return "NotSupported";
    case ErrorCode::ParseFailure: return "ParseFailure";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace tva
