#pragma once

#include <stdexcept>
#include <string>

namespace urcdm {

enum class ErrorKind {
  kInvalidShape,
  kState,
  kNumeric,
  kRange,
  kGeometry,
  kConfig,
  kDataset,
  kScheduling,
  kTile,
  kIo,
  kConflict,
  kNotFound,
  kSetup,
  kInvalidArgument,
  kInternal,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

// Process exit code for the CLI: 2 validation, 3 numeric, 4 I/O, 1 otherwise.
int exit_code_for(ErrorKind kind);

}  // namespace urcdm
