#include "phenoscope/error.hpp"

#include "phenoscope/types.hpp"

#include <cmath>
#include <set>

namespace phenoscope {

std::string_view errc_name(Errc code) noexcept {
    switch (code) {
        case Errc::MissingColumn: return "MissingColumn";
        case Errc::DuplicateKey: return "DuplicateKey";
        case Errc::EmptyManifest: return "EmptyManifest";
        case Errc::DecodeError: return "DecodeError";
        case Errc::ChannelMapError: return "ChannelMapError";
        case Errc::ModelLoadError: return "ModelLoadError";
        case Errc::TapMismatch: return "TapMismatch";
        case Errc::InferenceError: return "InferenceError";
        case Errc::EmptyInput: return "EmptyInput";
        case Errc::RankError: return "RankError";
        case Errc::DimMismatch: return "DimMismatch";
        case Errc::KTooLarge: return "KTooLarge";
        case Errc::PerplexityTooHigh: return "PerplexityTooHigh";
        case Errc::EmptySubset: return "EmptySubset";
        case Errc::UnassignedRow: return "UnassignedRow";
        case Errc::NoKeptCompounds: return "NoKeptCompounds";
        case Errc::ThresholdUnreachable: return "ThresholdUnreachable";
        case Errc::CorruptFile: return "CorruptFile";
        case Errc::StageOrderViolation: return "StageOrderViolation";
        case Errc::IoError: return "IoError";
        case Errc::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

void validate(const FeatureMatrix& m) {
    if (static_cast<Eigen::Index>(m.row_ids.size()) != m.rows())
        throw Error(Errc::InvalidArgument, "row_ids length " + std::to_string(m.row_ids.size()) +
                                               " != rows " + std::to_string(m.rows()));
    if (!m.values.allFinite()) throw Error(Errc::InvalidArgument, "feature matrix has non-finite values");
    std::set<RowKey> seen;
    for (const auto& k : m.row_ids)
        if (!seen.insert(k).second) throw Error(Errc::DuplicateKey, "row id " + k.str() + " repeated");
}

}  // namespace phenoscope
