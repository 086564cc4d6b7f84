#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fedstock/synth.hpp"

namespace fedstock {

struct DatasetMeta {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string tool_version;
    NormalizationSpec normalization;
    WindowConfig window;
    double test_fraction = 0.2;
};

struct LoadedDataset {
    DatasetMeta meta;
    SynthResult data;
};

// One line-delimited JSON file per farm plus a manifest listing farms,
// counts, seed, and config hash. Record fields: animal id, split, static
// category codes, and the 23 month slots of 4 normalized features + flag.
void save_dataset(const SynthResult& result, const DataConfig& config, std::uint64_t seed,
                  const std::string& config_hash, const std::filesystem::path& dir);

LoadedDataset load_dataset(const std::filesystem::path& dir);

bool dataset_exists(const std::filesystem::path& dir);

}  // namespace fedstock
