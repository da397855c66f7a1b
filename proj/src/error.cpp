#include "promptseg/error.hpp"

namespace promptseg {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::ZeroVectorRow: return "ZeroVectorRow";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::BackendFrozen: return "BackendFrozen";
    case ErrorCode::PreprocessError: return "PreprocessError";
    case ErrorCode::EmptyPrompt: return "EmptyPrompt";
    case ErrorCode::ActivationsUnavailable: return "ActivationsUnavailable";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadFractions: return "BadFractions";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::CorpusTooSmall: return "CorpusTooSmall";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NoForeground: return "NoForeground";
    case ErrorCode::EmptySegmentation: return "EmptySegmentation";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::CheckpointCorrupt: return "CheckpointCorrupt";
    case ErrorCode::SingleClassGT: return "SingleClassGT";
    case ErrorCode::UnknownCommand: return "UnknownCommand";
    }
    return "Unknown";
}

} // namespace promptseg
