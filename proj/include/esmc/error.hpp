#pragma once

#include <stdexcept>
#include <string>

namespace esmc {

// Base for every error raised by the library. Messages carry enough context
// (path, image id, line number) to be printed verbatim by the CLI.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem failure: missing file, unwritable directory, short read.
class IoError : public Error {
 public:
  using Error::Error;
};

// Bytes on disk disagree with what the manifest declares.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A value violates a type invariant or an operation precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during optimisation (non-finite loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace esmc
