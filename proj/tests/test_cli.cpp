#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fedstock/config.hpp"

using namespace fedstock;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fedstock_bin() {
    const char* bin = std::getenv("FEDSTOCK_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "FEDSTOCK_BIN must point at the fedstock binary");
    return bin;
}

int run_cmd(const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json smoke_config(const std::string& out_dir) {
    return {
        {"seed", 7},
        {"output_dir", out_dir},
        {"data",
         {{"preset", "smoke"},
          {"window", {{"input_len", 12}, {"horizon", 3}, {"stride", 3}}},
          {"test_fraction", 0.2}}},
        {"model", {{"d_e", 4}, {"d_h", 8}, {"head_hidden", 8}}},
        {"training",
         {{"rounds", 2}, {"local_epochs", 1}, {"learning_rate", 0.02}}},
    };
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

fs::path write_config(const TempDir& dir, const json& j, const char* name = "config.json") {
    const fs::path p = dir.path / name;
    std::ofstream out(p);
    out << j.dump(2);
    return p;
}

}  // namespace

TEST_CASE("config round-trips losslessly through JSON") {
    ExperimentConfig cfg = config_from_json(smoke_config("out"));
    const json dumped = config_to_json(cfg);
    ExperimentConfig again = config_from_json(dumped);
    CHECK(config_to_json(again) == dumped);
    CHECK(config_hash(cfg) == config_hash(again));
    CHECK(cfg.preset == "smoke");
    CHECK(cfg.data.farms.size() == 2);
}

TEST_CASE("config hash covers seed, data, and model but not training") {
    ExperimentConfig a = config_from_json(smoke_config("out"));
    ExperimentConfig b = a;
    b.training.rounds = 99;
    CHECK(config_hash(a) == config_hash(b));
    ExperimentConfig c = a;
    c.seed = 8;
    CHECK(config_hash(a) != config_hash(c));
    ExperimentConfig d = a;
    d.model.d_h = 16;
    CHECK(config_hash(a) != config_hash(d));
    ExperimentConfig e = a;
    e.data.farms[0].n_animals += 1;
    CHECK(config_hash(a) != config_hash(e));
}

TEST_CASE("config validation reports the failing field path") {
    json bad = smoke_config("out");
    bad["training"]["rounds"] = 0;
    try {
        config_from_json(bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field == "training.rounds");
    }

    json bad_window = smoke_config("out");
    bad_window["data"]["window"]["input_len"] = 25;
    try {
        config_from_json(bad_window);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field.rfind("data.window", 0) == 0);
    }

    json no_farms = smoke_config("out");
    no_farms["data"].erase("preset");
    CHECK_THROWS_AS(config_from_json(no_farms), ConfigError);
}

TEST_CASE("unknown preset is rejected") {
    json j = smoke_config("out");
    j["data"]["preset"] = "nope";
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("table3-mix preset spans the five size buckets with bias spread") {
    const auto farms = preset_farms("table3-mix");
    CHECK(farms.size() >= 15);
    int small = 0, b51 = 0, b201 = 0, b501 = 0, big = 0;
    double lo_bias = 10.0, hi_bias = 0.0;
    long long total = 0;
    for (const auto& f : farms) {
        total += f.n_animals;
        lo_bias = std::min(lo_bias, f.growth_bias);
        hi_bias = std::max(hi_bias, f.growth_bias);
        if (f.n_animals <= 50) ++small;
        else if (f.n_animals <= 200) ++b51;
        else if (f.n_animals <= 500) ++b201;
        else if (f.n_animals <= 1000) ++b501;
        else ++big;
    }
    CHECK(small >= 5);
    CHECK(b51 >= 3);
    CHECK(b201 >= 1);
    CHECK(b501 >= 1);
    CHECK(big >= 1);
    CHECK(lo_bias <= 0.85);   // spread of at least +-15%
    CHECK(hi_bias >= 1.15);
    CHECK(total >= 1500);
    CHECK(total <= 3000);
}

TEST_CASE("synth is deterministic and train/evaluate complete on the smoke preset") {
    const std::string bin = fedstock_bin();
    TempDir dir("fedstock_cli_smoke");
    const fs::path cfg_a = write_config(dir, smoke_config((dir.path / "a").string()), "a.json");
    const fs::path cfg_b = write_config(dir, smoke_config((dir.path / "b").string()), "b.json");

    CHECK(run_cmd(bin + " synth --config " + cfg_a.string()) == 0);
    CHECK(run_cmd(bin + " synth --config " + cfg_b.string()) == 0);
    CHECK(file_bytes(dir.path / "a" / "dataset" / "manifest.json") ==
          file_bytes(dir.path / "b" / "dataset" / "manifest.json"));
    CHECK(file_bytes(dir.path / "a" / "dataset" / "farm_1.jsonl") ==
          file_bytes(dir.path / "b" / "dataset" / "farm_1.jsonl"));

    CHECK(run_cmd(bin + " train --config " + cfg_a.string() + " --regime fl --threads 1") == 0);
    CHECK(fs::exists(dir.path / "a" / "checkpoints" / "fl" / "global.ckpt"));
    CHECK(run_cmd(bin + " evaluate --config " + cfg_a.string() + " --regime fl") == 0);
    CHECK(fs::exists(dir.path / "a" / "reports" / "metrics_fl.json"));

    // pfl emits one body plus K head checkpoints
    CHECK(run_cmd(bin + " train --config " + cfg_a.string() + " --regime pfl --threads 1") == 0);
    CHECK(fs::exists(dir.path / "a" / "checkpoints" / "pfl" / "body.ckpt"));
    CHECK(fs::exists(dir.path / "a" / "checkpoints" / "pfl" / "head_farm_1.ckpt"));
    CHECK(fs::exists(dir.path / "a" / "checkpoints" / "pfl" / "head_farm_2.ckpt"));
}

TEST_CASE("train without a dataset exits 3; hash mismatch exits 5") {
    const std::string bin = fedstock_bin();
    TempDir dir("fedstock_cli_exits");
    const fs::path cfg = write_config(dir, smoke_config((dir.path / "out").string()));

    CHECK(run_cmd(bin + " train --config " + cfg.string() + " --regime fl") == 3);

    CHECK(run_cmd(bin + " synth --config " + cfg.string()) == 0);
    // a different seed changes the effective config hash
    CHECK(run_cmd(bin + " train --config " + cfg.string() + " --regime fl --seed 99") == 5);
}

TEST_CASE("invalid config exits 2") {
    const std::string bin = fedstock_bin();
    TempDir dir("fedstock_cli_badcfg");
    json bad = smoke_config((dir.path / "out").string());
    bad["training"]["learning_rate"] = -1.0;
    const fs::path cfg = write_config(dir, bad);
    CHECK(run_cmd(bin + " synth --config " + cfg.string()) == 2);
}

TEST_CASE("compare writes a consolidated table with zero self-deltas") {
    const std::string bin = fedstock_bin();
    TempDir dir("fedstock_cli_compare");
    const json report = {
        {"tool_version", "0.1.0"},
        {"config_hash", "aa"},
        {"seed", 1},
        {"regime", "fl"},
        {"horizon", 2},
        {"n_test_instances", 4},
        {"overall",
         {{"rmse_kg", 30.0}, {"mae_kg", 22.0}, {"mape_pct", 6.0}, {"r2", 0.9}}},
        {"per_horizon",
         {{{"horizon", 1}, {"rmse_kg", 25.0}, {"mae_kg", 20.0}, {"mape_pct", 5.0}, {"r2", 0.92}},
          {{"horizon", 2}, {"rmse_kg", 35.0}, {"mae_kg", 24.0}, {"mape_pct", 7.0}, {"r2", 0.88}}}},
        {"per_farm",
         {{{"farm_id", 1},
           {"iam_count", 10},
           {"n_instances", 4},
           {"rmse_kg", 30.0},
           {"mae_kg", 22.0},
           {"mape_pct", 6.0},
           {"r2", 0.9}}}},
    };
    const fs::path r1 = dir.path / "metrics_fl.json";
    std::ofstream(r1) << report.dump();

    CHECK(run_cmd(bin + " compare " + r1.string() + " " + r1.string() + " --out " +
                  dir.path.string()) == 0);
    const std::string csv = file_bytes(dir.path / "comparison.csv");
    CHECK(csv.find("fl,overall,30.000000,22.000000,6.000000,0.900000,0.000000,0.000000") !=
          std::string::npos);

    // mismatched horizons exit 6
    json other = report;
    other["horizon"] = 3;
    other["regime"] = "pfl";
    const fs::path r2 = dir.path / "metrics_pfl.json";
    std::ofstream(r2) << other.dump();
    CHECK(run_cmd(bin + " compare " + r1.string() + " " + r2.string() + " --out " +
                  dir.path.string()) == 6);
}

TEST_CASE("rerunning evaluate reproduces byte-identical reports") {
    const std::string bin = fedstock_bin();
    TempDir dir("fedstock_cli_repro");
    const fs::path cfg = write_config(dir, smoke_config((dir.path / "out").string()));
    REQUIRE(run_cmd(bin + " synth --config " + cfg.string()) == 0);
    REQUIRE(run_cmd(bin + " train --config " + cfg.string() + " --regime centralized") == 0);
    REQUIRE(run_cmd(bin + " evaluate --config " + cfg.string() + " --regime centralized") == 0);
    const std::string first =
        file_bytes(dir.path / "out" / "reports" / "metrics_centralized.json");
    REQUIRE(run_cmd(bin + " evaluate --config " + cfg.string() + " --regime centralized") == 0);
    const std::string second =
        file_bytes(dir.path / "out" / "reports" / "metrics_centralized.json");
    CHECK(first == second);
    CHECK(!first.empty());
}
