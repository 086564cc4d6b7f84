#include "fedstock/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "fedstock/errors.hpp"
#include "fedstock/version.hpp"

namespace fedstock {

using nlohmann::json;

namespace {

json range_json(const NormalizationSpec::Range& r) { return json::array({r.lo, r.hi}); }

NormalizationSpec::Range range_from(const json& v) {
    return {v.at(0).get<double>(), v.at(1).get<double>()};
}

std::filesystem::path farm_file(const std::filesystem::path& dir, int farm_id) {
    return dir / ("farm_" + std::to_string(farm_id) + ".jsonl");
}

}  // namespace

bool dataset_exists(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "manifest.json");
}

void save_dataset(const SynthResult& result, const DataConfig& config, std::uint64_t seed,
                  const std::string& config_hash, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    json farms = json::array();
    for (const auto& farm : result.farms) {
        std::ofstream out(farm_file(dir, farm.spec.farm_id), std::ios::trunc);
        if (!out) {
            throw IoError("cannot write dataset file for farm " +
                          std::to_string(farm.spec.farm_id));
        }
        std::size_t train_animals = 0;
        std::size_t test_animals = 0;
        std::size_t train_instances = 0;
        std::size_t test_instances = 0;
        for (const auto& animal : farm.animals) {
            json months = json::array();
            for (const auto& s : animal.traj.months) {
                months.push_back(
                    json::array({s.weight, s.age, s.distance, s.credibility, s.observed}));
            }
            const json record = {{"animal", animal.traj.animal_id},
                                 {"split", animal.is_test ? "test" : "train"},
                                 {"static", animal.traj.categories},
                                 {"months", std::move(months)}};
            out << record.dump() << "\n";

            const std::size_t windows = make_instances(animal.traj, config.window).size();
            if (animal.is_test) {
                ++test_animals;
                test_instances += windows;
            } else {
                ++train_animals;
                train_instances += windows;
            }
        }
        farms.push_back({{"farm_id", farm.spec.farm_id},
                         {"n_animals", farm.spec.n_animals},
                         {"region_id", farm.spec.region_id},
                         {"state_id", farm.spec.state_id},
                         {"growth_bias", farm.spec.growth_bias},
                         {"noise_sd", farm.spec.noise_sd},
                         {"obs_rate", farm.spec.obs_rate},
                         {"train_animals", train_animals},
                         {"test_animals", test_animals},
                         {"train_instances", train_instances},
                         {"test_instances", test_instances}});
    }

    const json manifest = {
        {"config_hash", config_hash},
        {"seed", seed},
        {"tool_version", kToolVersion},
        {"normalization",
         {{"weight", range_json(config.normalization.weight)},
          {"age", range_json(config.normalization.age)},
          {"distance", range_json(config.normalization.distance)},
          {"credibility", range_json(config.normalization.credibility)}}},
        {"window",
         {{"input_len", config.window.input_len},
          {"horizon", config.window.horizon},
          {"stride", config.window.stride}}},
        {"test_fraction", config.test_fraction},
        {"farms", std::move(farms)},
        {"report",
         {{"quantile_fallbacks", result.report.quantile_fallbacks},
          {"clipped_values", result.report.clipped_values},
          {"flags", result.report.flags}}},
    };
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write dataset manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream min(dir / "manifest.json");
    if (!min) throw IoError("dataset manifest not found in " + dir.string());
    json manifest;
    try {
        min >> manifest;
    } catch (const json::exception& e) {
        throw IoError("malformed dataset manifest: " + std::string(e.what()));
    }

    LoadedDataset loaded;
    try {
        loaded.meta.config_hash = manifest.at("config_hash").get<std::string>();
        loaded.meta.seed = manifest.at("seed").get<std::uint64_t>();
        loaded.meta.tool_version = manifest.at("tool_version").get<std::string>();
        const auto& norm = manifest.at("normalization");
        loaded.meta.normalization.weight = range_from(norm.at("weight"));
        loaded.meta.normalization.age = range_from(norm.at("age"));
        loaded.meta.normalization.distance = range_from(norm.at("distance"));
        loaded.meta.normalization.credibility = range_from(norm.at("credibility"));
        const auto& window = manifest.at("window");
        loaded.meta.window.input_len = window.at("input_len").get<int>();
        loaded.meta.window.horizon = window.at("horizon").get<int>();
        loaded.meta.window.stride = window.at("stride").get<int>();
        loaded.meta.test_fraction = manifest.at("test_fraction").get<double>();

        const auto& report = manifest.at("report");
        loaded.data.report.quantile_fallbacks = report.at("quantile_fallbacks").get<long long>();
        loaded.data.report.clipped_values = report.at("clipped_values").get<long long>();
        loaded.data.report.flags = report.at("flags").get<std::vector<std::string>>();

        for (const auto& fj : manifest.at("farms")) {
            FarmData farm;
            farm.spec.farm_id = fj.at("farm_id").get<int>();
            farm.spec.n_animals = fj.at("n_animals").get<int>();
            farm.spec.region_id = fj.at("region_id").get<int>();
            farm.spec.state_id = fj.at("state_id").get<int>();
            farm.spec.growth_bias = fj.at("growth_bias").get<double>();
            farm.spec.noise_sd = fj.at("noise_sd").get<double>();
            farm.spec.obs_rate = fj.at("obs_rate").get<double>();

            std::ifstream fin(farm_file(dir, farm.spec.farm_id));
            if (!fin) {
                throw IoError("dataset file missing for farm " +
                              std::to_string(farm.spec.farm_id));
            }
            std::string line;
            while (std::getline(fin, line)) {
                if (line.empty()) continue;
                const json record = json::parse(line);
                AnimalData animal;
                animal.is_test = record.at("split").get<std::string>() == "test";
                animal.traj.animal_id = record.at("animal").get<std::int64_t>();
                animal.traj.farm_id = farm.spec.farm_id;
                animal.traj.categories = record.at("static").get<std::vector<int>>();
                const auto& months = record.at("months");
                if (months.size() != static_cast<std::size_t>(kMonthCount)) {
                    throw IoError("animal " + std::to_string(animal.traj.animal_id) + " has " +
                                  std::to_string(months.size()) + " month slots");
                }
                for (int t = 0; t < kMonthCount; ++t) {
                    const auto& s = months[static_cast<std::size_t>(t)];
                    animal.traj.months[t].weight = s.at(0).get<double>();
                    animal.traj.months[t].age = s.at(1).get<double>();
                    animal.traj.months[t].distance = s.at(2).get<double>();
                    animal.traj.months[t].credibility = s.at(3).get<double>();
                    animal.traj.months[t].observed = s.at(4).get<int>();
                }
                farm.animals.push_back(std::move(animal));
            }
            loaded.data.farms.push_back(std::move(farm));
        }
    } catch (const json::exception& e) {
        throw IoError("malformed dataset in " + dir.string() + ": " + e.what());
    }
    return loaded;
}

}  // namespace fedstock
