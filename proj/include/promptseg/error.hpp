#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace promptseg {

// Machine-readable failure categories. The string form of each code is part of
// the HTTP and CLI error payloads.
enum class ErrorCode {
    ZeroVectorRow,
    BatchTooSmall,
    InvalidConfig,
    BackendUnavailable,
    BackendFrozen,
    PreprocessError,
    EmptyPrompt,
    ActivationsUnavailable,
    DecodeError,
    IoError,
    BadFractions,
    KTooLarge,
    CorpusTooSmall,
    LengthMismatch,
    SizeMismatch,
    ShapeMismatch,
    NoForeground,
    EmptySegmentation,
    EmptyTrainingSet,
    CheckpointCorrupt,
    SingleClassGT,
    UnknownCommand,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

  private:
    ErrorCode code_;
};

} // namespace promptseg
