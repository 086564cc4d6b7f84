#include "fedstock/config.hpp"

#include <fstream>

#include "fedstock/errors.hpp"

namespace fedstock {

using nlohmann::json;

void TrainingSection::validate() const {
    if (rounds < 1) throw ConfigError("training.rounds", "must be >= 1");
    if (local_epochs < 1) throw ConfigError("training.local_epochs", "must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate", "must be > 0");
    if (finetune_epochs < 1) throw ConfigError("training.finetune_epochs", "must be >= 1");
    if (!(participation > 0.0 && participation <= 1.0)) {
        throw ConfigError("training.participation", "must be in (0, 1]");
    }
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw ConfigError("training.validation_fraction", "must be in [0, 1)");
    }
}

void ExperimentConfig::validate() const {
    data.validate();
    model.validate();
    training.validate();
    if (model.horizon != data.window.horizon) {
        throw ConfigError("model.horizon", "must equal data.window.horizon");
    }
    if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
    // The generator emits the four default categorical features.
    if (model.category_cardinalities.size() != 4) {
        throw ConfigError("model.category_cardinalities",
                          "the synthetic pipeline requires the 4 default categories");
    }
    if (model.category_cardinalities[0] < kSexLevels) {
        throw ConfigError("model.category_cardinalities[0]",
                          "must cover " + std::to_string(kSexLevels) + " sex levels");
    }
    if (model.category_cardinalities[1] < kBreedLevels) {
        throw ConfigError("model.category_cardinalities[1]",
                          "must cover " + std::to_string(kBreedLevels) + " breed levels");
    }
    for (const auto& farm : data.farms) {
        if (farm.state_id >= model.category_cardinalities[2]) {
            throw ConfigError("data.farms[" + std::to_string(farm.farm_id) + "].state_id",
                              "exceeds model.category_cardinalities[2]");
        }
        if (farm.region_id >= model.category_cardinalities[3]) {
            throw ConfigError("data.farms[" + std::to_string(farm.farm_id) + "].region_id",
                              "exceeds model.category_cardinalities[3]");
        }
    }
}

FederationConfig ExperimentConfig::federation(AggregationPolicy policy, int threads) const {
    FederationConfig fed;
    fed.rounds = training.rounds;
    fed.local_epochs = training.local_epochs;
    fed.learning_rate = training.learning_rate;
    fed.policy = policy;
    fed.seed = seed;
    fed.participation = training.participation;
    fed.finetune_epochs = training.finetune_epochs;
    fed.validation_fraction = training.validation_fraction;
    fed.threads = threads;
    return fed;
}

std::vector<FarmSpec> preset_farms(const std::string& name) {
    std::vector<FarmSpec> farms;
    if (name == "smoke") {
        farms.push_back({1, 20, 0, 0, 0.92, 10.0, 2.5});
        farms.push_back({2, 20, 1, 1, 1.08, 10.0, 2.5});
        return farms;
    }
    if (name == "table3-mix") {
        // 18 farms spanning the five size buckets; growth bias spread +-18%
        // assigned so that bias is uncorrelated with region and size.
        const int sizes[] = {4,    5,    6,    8,    10,   12,   16,   20,   26,
                             34,   52,   65,   85,   110,  140,  205,  510,  1020};
        const double biases[] = {1.00, 0.86, 1.12, 0.94, 1.18, 0.82, 1.06, 0.90, 1.15,
                                 0.97, 0.84, 1.09, 0.88, 1.16, 1.02, 0.85, 1.13, 0.92};
        for (int i = 0; i < 18; ++i) {
            FarmSpec f;
            f.farm_id = i + 1;
            f.n_animals = sizes[i];
            f.region_id = i % 3;
            f.state_id = i % 2;
            f.growth_bias = biases[i];
            f.noise_sd = 12.0;
            f.obs_rate = 2.5;
            farms.push_back(f);
        }
        return farms;
    }
    throw ConfigError("data.preset", "unknown preset '" + name + "'");
}

namespace {

const json* find_path(const json& j, std::initializer_list<const char*> path) {
    const json* cur = &j;
    for (const char* key : path) {
        if (!cur->is_object() || !cur->contains(key)) return nullptr;
        cur = &(*cur)[key];
    }
    return cur;
}

std::string join_path(std::initializer_list<const char*> path) {
    std::string out;
    for (const char* key : path) {
        if (!out.empty()) out += ".";
        out += key;
    }
    return out;
}

template <typename T>
void read_into(const json& j, std::initializer_list<const char*> path, T& out) {
    const json* v = find_path(j, path);
    if (v == nullptr) return;
    try {
        out = v->get<T>();
    } catch (const json::exception&) {
        throw ConfigError(join_path(path), "has the wrong type");
    }
}

NormalizationSpec::Range range_from(const json& v, const std::string& field) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        throw ConfigError(field, "must be a [min, max] pair");
    }
    return {v[0].get<double>(), v[1].get<double>()};
}

FarmSpec farm_from_json(const json& v, std::size_t index) {
    const std::string base = "data.farms[" + std::to_string(index) + "]";
    if (!v.is_object()) throw ConfigError(base, "must be an object");
    FarmSpec f;
    auto get = [&](const char* key, auto& out, bool required) {
        if (!v.contains(key)) {
            if (required) throw ConfigError(base + "." + key, "is required");
            return;
        }
        try {
            out = v[key].get<std::decay_t<decltype(out)>>();
        } catch (const json::exception&) {
            throw ConfigError(base + "." + key, "has the wrong type");
        }
    };
    get("farm_id", f.farm_id, true);
    get("n_animals", f.n_animals, true);
    get("region_id", f.region_id, false);
    get("state_id", f.state_id, false);
    get("growth_bias", f.growth_bias, false);
    get("noise_sd", f.noise_sd, false);
    get("obs_rate", f.obs_rate, false);
    return f;
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("", "config must be a JSON object");
    ExperimentConfig cfg;
    read_into(j, {"seed"}, cfg.seed);
    read_into(j, {"output_dir"}, cfg.output_dir);

    read_into(j, {"data", "preset"}, cfg.preset);
    if (const json* farms = find_path(j, {"data", "farms"}); farms != nullptr) {
        if (!farms->is_array() || farms->empty()) {
            throw ConfigError("data.farms", "must be a non-empty array");
        }
        cfg.data.farms.clear();
        for (std::size_t i = 0; i < farms->size(); ++i) {
            cfg.data.farms.push_back(farm_from_json((*farms)[i], i));
        }
    } else if (!cfg.preset.empty()) {
        cfg.data.farms = preset_farms(cfg.preset);
    } else {
        throw ConfigError("data", "either data.farms or data.preset is required");
    }

    read_into(j, {"data", "growth", "mature_weight"}, cfg.data.growth.mature_weight);
    read_into(j, {"data", "growth", "shape_b"}, cfg.data.growth.shape_b);
    read_into(j, {"data", "growth", "rate_k"}, cfg.data.growth.rate_k);
    read_into(j, {"data", "growth", "animal_factor_sigma"}, cfg.data.growth.animal_factor_sigma);

    if (const json* bounds = find_path(j, {"data", "bounds"}); bounds != nullptr) {
        if (bounds->contains("weight")) {
            cfg.data.normalization.weight = range_from((*bounds)["weight"], "data.bounds.weight");
        }
        if (bounds->contains("age")) {
            cfg.data.normalization.age = range_from((*bounds)["age"], "data.bounds.age");
        }
        if (bounds->contains("distance")) {
            cfg.data.normalization.distance =
                range_from((*bounds)["distance"], "data.bounds.distance");
        }
        if (bounds->contains("credibility")) {
            cfg.data.normalization.credibility =
                range_from((*bounds)["credibility"], "data.bounds.credibility");
        }
    }

    read_into(j, {"data", "window", "input_len"}, cfg.data.window.input_len);
    read_into(j, {"data", "window", "horizon"}, cfg.data.window.horizon);
    read_into(j, {"data", "window", "stride"}, cfg.data.window.stride);
    read_into(j, {"data", "test_fraction"}, cfg.data.test_fraction);

    read_into(j, {"model", "d_e"}, cfg.model.d_e);
    read_into(j, {"model", "d_h"}, cfg.model.d_h);
    read_into(j, {"model", "head_hidden"}, cfg.model.head_hidden);
    read_into(j, {"model", "category_cardinalities"}, cfg.model.category_cardinalities);
    cfg.model.horizon = cfg.data.window.horizon;

    read_into(j, {"training", "rounds"}, cfg.training.rounds);
    read_into(j, {"training", "local_epochs"}, cfg.training.local_epochs);
    read_into(j, {"training", "learning_rate"}, cfg.training.learning_rate);
    read_into(j, {"training", "finetune_epochs"}, cfg.training.finetune_epochs);
    read_into(j, {"training", "participation"}, cfg.training.participation);
    read_into(j, {"training", "validation_fraction"}, cfg.training.validation_fraction);

    cfg.validate();
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    json farms = json::array();
    for (const auto& f : cfg.data.farms) {
        farms.push_back({{"farm_id", f.farm_id},
                         {"n_animals", f.n_animals},
                         {"region_id", f.region_id},
                         {"state_id", f.state_id},
                         {"growth_bias", f.growth_bias},
                         {"noise_sd", f.noise_sd},
                         {"obs_rate", f.obs_rate}});
    }
    json j = {
        {"seed", cfg.seed},
        {"output_dir", cfg.output_dir},
        {"data",
         {{"farms", std::move(farms)},
          {"growth",
           {{"mature_weight", cfg.data.growth.mature_weight},
            {"shape_b", cfg.data.growth.shape_b},
            {"rate_k", cfg.data.growth.rate_k},
            {"animal_factor_sigma", cfg.data.growth.animal_factor_sigma}}},
          {"bounds",
           {{"weight", {cfg.data.normalization.weight.lo, cfg.data.normalization.weight.hi}},
            {"age", {cfg.data.normalization.age.lo, cfg.data.normalization.age.hi}},
            {"distance",
             {cfg.data.normalization.distance.lo, cfg.data.normalization.distance.hi}},
            {"credibility",
             {cfg.data.normalization.credibility.lo, cfg.data.normalization.credibility.hi}}}},
          {"window",
           {{"input_len", cfg.data.window.input_len},
            {"horizon", cfg.data.window.horizon},
            {"stride", cfg.data.window.stride}}},
          {"test_fraction", cfg.data.test_fraction}}},
        {"model",
         {{"d_e", cfg.model.d_e},
          {"d_h", cfg.model.d_h},
          {"head_hidden", cfg.model.head_hidden},
          {"category_cardinalities", cfg.model.category_cardinalities}}},
        {"training",
         {{"rounds", cfg.training.rounds},
          {"local_epochs", cfg.training.local_epochs},
          {"learning_rate", cfg.training.learning_rate},
          {"finetune_epochs", cfg.training.finetune_epochs},
          {"participation", cfg.training.participation},
          {"validation_fraction", cfg.training.validation_fraction}}},
    };
    if (!cfg.preset.empty()) j["data"]["preset"] = cfg.preset;
    return j;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("", "config is not valid JSON: " + std::string(e.what()));
    }
    return config_from_json(j);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string config_hash(const ExperimentConfig& cfg) {
    json full = config_to_json(cfg);
    json hashed = {{"seed", full["seed"]}, {"data", full["data"]}, {"model", full["model"]}};
    const std::uint64_t h = fnv1a64(hashed.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace fedstock
