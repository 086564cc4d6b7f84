#pragma once

#include <filesystem>
#include <string>

#include "fedstock/params.hpp"

namespace fedstock {

// HEAD-tagged parameters are exactly the final fully connected layers; they
// are named with this prefix everywhere in the artifact.
inline constexpr const char* kHeadPrefix = "head.";

inline Partition partition_for_name(const std::string& name) {
    return name.rfind(kHeadPrefix, 0) == 0 ? Partition::Head : Partition::Body;
}

// Flat binary checkpoint: header (format version, parameter count) followed by
// per-parameter records (name length, name bytes, shape rank, dims,
// little-endian float64 payload). Round-trips are bit-exact.
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace fedstock
