#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace phenoscope {

enum class Errc {
    MissingColumn,
    DuplicateKey,
    EmptyManifest,
    DecodeError,
    ChannelMapError,
    ModelLoadError,
    TapMismatch,
    InferenceError,
    EmptyInput,
    RankError,
    DimMismatch,
    KTooLarge,
    PerplexityTooHigh,
    EmptySubset,
    UnassignedRow,
    NoKeptCompounds,
    ThresholdUnreachable,
    CorruptFile,
    StageOrderViolation,
    IoError,
    InvalidArgument,
};

std::string_view errc_name(Errc code) noexcept;

// Every recoverable failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& detail)
        : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code), detail_(detail) {}

    Errc code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    Errc code_;
    std::string detail_;
};

}  // namespace phenoscope
