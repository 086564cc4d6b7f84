#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedstock/fl.hpp"
#include "fedstock/model.hpp"
#include "fedstock/synth.hpp"

namespace fedstock {

struct TrainingSection {
    int rounds = 30;
    int local_epochs = 2;
    double learning_rate = 0.02;
    int finetune_epochs = 2;
    double participation = 1.0;
    double validation_fraction = 0.0;

    void validate() const;
};

// One JSON document drives the whole pipeline. The model horizon is tied to
// data.window.horizon; preset names expand to concrete farm lists at load so
// the config hash always covers the farms actually generated.
struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::string output_dir = "out";
    std::string preset;  // informational; farms are already expanded
    DataConfig data;
    ModelConfig model;
    TrainingSection training;

    void validate() const;
    FederationConfig federation(AggregationPolicy policy, int threads) const;
};

// Named farm mixes. "smoke" is a 2-farm quick check; "table3-mix" spans the
// five farm-size buckets with a heterogeneous growth-bias spread.
std::vector<FarmSpec> preset_farms(const std::string& name);

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config_file(const std::filesystem::path& path);

// FNV-1a over the canonical serialized {seed, data, model} sections: the
// parts that determine dataset bytes and checkpoint compatibility.
std::string config_hash(const ExperimentConfig& config);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace fedstock
