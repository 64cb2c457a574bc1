#include "urcdm/error.hpp"

namespace urcdm {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidShape: return "invalid-shape";
    case ErrorKind::kState: return "state";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kGeometry: return "geometry";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kDataset: return "dataset";
    case ErrorKind::kScheduling: return "scheduling";
    case ErrorKind::kTile: return "tile";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kSetup: return "setup";
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kInternal: return "internal";
  }
  return "unknown";
}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNumeric:
    case ErrorKind::kTile:
      return 3;
    case ErrorKind::kIo:
      return 4;
    case ErrorKind::kInvalidShape:
    case ErrorKind::kRange:
    case ErrorKind::kGeometry:
    case ErrorKind::kConfig:
    case ErrorKind::kDataset:
    case ErrorKind::kSetup:
    case ErrorKind::kInvalidArgument:
      return 2;
    default:
      return 1;
  }
}

}  // namespace urcdm
