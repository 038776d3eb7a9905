#pragma once

#include <stdexcept>
#include <string>

namespace diffaug {

// Domain error categories. The CLI maps these to exit code 1 and a
// machine-readable error JSON; tests match on the kind.
enum class ErrorKind {
    MissingFile,
    ParseError,
    LabelOutOfRange,
    DuplicatePath,
    UndecodableImage,
    ClassTooSmall,
    ClassMismatch,
    InvalidRange,
    NonPositiveT,
    ShapeMismatch,
    TimestepOutOfRange,
    TimestepOrderError,
    OddDimension,
    ClassOutOfRange,
    EmptySplit,
    NonFiniteLoss,
    LengthMismatch,
    UnknownLayer,
    DimensionMismatch,
    NonPSDProduct,
    TooFewSamples,
    CheckpointError,
    ConfigError,
    IoError,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool cond, ErrorKind kind, const std::string& message) {
    if (!cond) fail(kind, message);
}

}  // namespace diffaug
