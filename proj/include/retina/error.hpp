#pragma once

#include <stdexcept>
#include <string>

namespace retina {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// Feature vector / model schema disagreement.
class SchemaMismatch : public Error {
 public:
  using Error::Error;
};

/// A stage input produced by an earlier stage (or supplied by the user) is absent.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

/// File-level failure. The kind separates the three failure modes callers
/// need to tell apart when loading rasters.
class IoError : public Error {
 public:
  enum class Kind { missing_file, unsupported_format, corrupt_data, write_failed };

  IoError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace retina
