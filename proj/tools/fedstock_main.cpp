// fedstock: reproducible experiment driver for federated livestock growth
// forecasting. Subcommands: synth | train | evaluate | compare.
//
// Exit codes: 0 ok, 2 invalid config, 3 missing dataset, 4 training
// divergence, 5 config-hash mismatch, 6 incompatible horizons, 1 other.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedstock/checkpoint.hpp"
#include "fedstock/config.hpp"
#include "fedstock/dataset.hpp"
#include "fedstock/errors.hpp"
#include "fedstock/fl.hpp"
#include "fedstock/metrics.hpp"
#include "fedstock/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedstock;

namespace {

enum ExitCode {
    kOk = 0,
    kOther = 1,
    kBadConfig = 2,
    kMissingDataset = 3,
    kDivergence = 4,
    kHashMismatch = 5,
    kHorizonMismatch = 6,
};

int log_level() {
    const char* env = std::getenv("FEDSTOCK_LOG");
    if (env == nullptr) return 1;
    const std::string v = env;
    if (v == "quiet") return 0;
    if (v == "debug") return 2;
    return 1;
}

void log_info(const std::string& msg) {
    if (log_level() >= 1) std::fprintf(stderr, "[fedstock] %s\n", msg.c_str());
}

struct CommonOpts {
    std::string config_path;
    std::string out_override;
    std::optional<std::uint64_t> seed_override;
    int threads = 0;
};

ExperimentConfig load_effective(const CommonOpts& opts) {
    ExperimentConfig cfg = load_config_file(opts.config_path);
    if (opts.seed_override) cfg.seed = *opts.seed_override;
    if (!opts.out_override.empty()) cfg.output_dir = opts.out_override;
    cfg.validate();
    return cfg;
}

int effective_threads(const CommonOpts& opts) {
    if (opts.threads > 0) return opts.threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

json quad_json(const MetricQuad& q) {
    json j = {{"rmse_kg", q.rmse}, {"mae_kg", q.mae}, {"mape_pct", q.mape_pct}};
    if (q.r2) {
        j["r2"] = *q.r2;
    } else {
        j["r2"] = nullptr;
    }
    return j;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string quad_csv(const MetricQuad& q) {
    return fmt(q.rmse) + "," + fmt(q.mae) + "," + fmt(q.mape_pct) + "," +
           (q.r2 ? fmt(*q.r2) : std::string("NA"));
}

struct TrainedArtifacts {
    fs::path dir;       // checkpoints/<regime>
    std::string regime;
};

fs::path dataset_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output_dir) / "dataset"; }
fs::path checkpoints_dir(const ExperimentConfig& cfg, const std::string& regime) {
    return fs::path(cfg.output_dir) / "checkpoints" / regime;
}
fs::path reports_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output_dir) / "reports"; }

const std::vector<std::string> kRegimes = {"centralized", "local",    "fl",          "fl-sqrt",
                                           "pfl",         "pfl-sqrt", "pfl-finetune"};

AggregationPolicy regime_policy(const std::string& regime) {
    return regime == "fl-sqrt" || regime == "pfl-sqrt" ? AggregationPolicy::Sqrt
                                                       : AggregationPolicy::Size;
}

std::vector<ClientState> to_client_states(const std::vector<ClientDataset>& clients) {
    std::vector<ClientState> out;
    for (const auto& c : clients) {
        if (c.train.empty()) continue;
        ClientState s;
        s.client_id = c.farm_id;
        s.n_animals = c.n_animals;
        s.train = c.train;
        out.push_back(std::move(s));
    }
    return out;
}

json round_json(const RoundRecord& r) {
    json j = {{"round", r.round},
              {"client_ids", r.client_ids},
              {"weights", r.weights},
              {"client_losses", r.client_losses},
              {"excluded", r.excluded},
              {"mean_loss", r.mean_loss},
              {"wall_ms", r.wall_ms}};
    if (r.val_rmse) j["val_rmse"] = *r.val_rmse;
    return j;
}

void write_rounds_log(const fs::path& path, const std::vector<RoundRecord>& rounds) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    for (const auto& r : rounds) out << round_json(r).dump() << "\n";
}

void write_checkpoint_meta(const fs::path& dir, const ExperimentConfig& cfg,
                           const std::string& regime) {
    const json meta = {{"config_hash", config_hash(cfg)},
                       {"seed", cfg.seed},
                       {"tool_version", kToolVersion},
                       {"regime", regime}};
    write_text(dir / "meta.json", meta.dump(2) + "\n");
}

int cmd_synth(const CommonOpts& opts) {
    const ExperimentConfig cfg = load_effective(opts);
    const SynthResult result = synthesize(cfg.data, cfg.seed);
    const fs::path dir = dataset_dir(cfg);
    save_dataset(result, cfg.data, cfg.seed, config_hash(cfg), dir);
    write_text(fs::path(cfg.output_dir) / "config.json", config_to_json(cfg).dump(2) + "\n");

    std::size_t animals = 0;
    for (const auto& f : result.farms) animals += f.animals.size();
    log_info("synth: " + std::to_string(result.farms.size()) + " farms, " +
             std::to_string(animals) + " animals -> " + dir.string());
    return kOk;
}

int cmd_train(const CommonOpts& opts, const std::string& regime) {
    const ExperimentConfig cfg = load_effective(opts);
    const fs::path ds_dir = dataset_dir(cfg);
    if (!dataset_exists(ds_dir)) {
        std::fprintf(stderr, "fedstock: dataset not found in %s (run `fedstock synth` first)\n",
                     ds_dir.string().c_str());
        return kMissingDataset;
    }
    const LoadedDataset loaded = load_dataset(ds_dir);
    if (loaded.meta.config_hash != config_hash(cfg)) {
        std::fprintf(stderr, "fedstock: dataset config hash %s does not match config %s\n",
                     loaded.meta.config_hash.c_str(), config_hash(cfg).c_str());
        return kHashMismatch;
    }

    const auto clients = build_clients(loaded.data, loaded.meta.window);
    const auto states = to_client_states(clients);
    GrowthModel model(cfg.model);
    FederationConfig fed = cfg.federation(regime_policy(regime), effective_threads(opts));

    const fs::path ckpt_dir = checkpoints_dir(cfg, regime);
    fs::create_directories(ckpt_dir);
    const fs::path log_path = fs::path(cfg.output_dir) / "logs" / (regime + "_rounds.jsonl");

    try {
        if (regime == "centralized") {
            const CentralResult res = run_centralized(fed, states, model);
            save_checkpoint(res.params, ckpt_dir / "global.ckpt");
            json trace = {{"epoch_losses", res.epoch_losses}};
            write_text(fs::path(cfg.output_dir) / "logs" / "centralized_trace.json",
                       trace.dump() + "\n");
        } else if (regime == "local") {
            const LocalOnlyResult res = run_local_only(fed, states, model);
            for (const auto& [id, params] : res.models) {
                save_checkpoint(params, ckpt_dir / ("farm_" + std::to_string(id) + ".ckpt"));
            }
            json trace = {{"diverged", res.diverged}};
            write_text(fs::path(cfg.output_dir) / "logs" / "local_trace.json",
                       trace.dump() + "\n");
        } else if (regime == "fl" || regime == "fl-sqrt") {
            const FlResult res = run_fl(fed, states, model);
            save_checkpoint(res.global, ckpt_dir / "global.ckpt");
            write_rounds_log(log_path, res.rounds);
        } else if (regime == "pfl" || regime == "pfl-sqrt") {
            const PflResult res = run_pfl(fed, states, model);
            save_checkpoint(res.body, ckpt_dir / "body.ckpt");
            for (const auto& [id, head] : res.heads) {
                save_checkpoint(head, ckpt_dir / ("head_farm_" + std::to_string(id) + ".ckpt"));
            }
            write_rounds_log(log_path, res.rounds);
        } else if (regime == "pfl-finetune") {
            const PflFinetuneResult res = run_pfl_finetune(fed, states, model);
            save_checkpoint(res.global, ckpt_dir / "global.ckpt");
            for (const auto& [id, params] : res.models) {
                save_checkpoint(params, ckpt_dir / ("farm_" + std::to_string(id) + ".ckpt"));
            }
            write_rounds_log(log_path, res.rounds);
        } else {
            std::fprintf(stderr, "fedstock: unknown regime %s\n", regime.c_str());
            return kBadConfig;
        }
    } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "fedstock: training diverged (client %d): %s\n", e.client_id,
                     e.what());
        return kDivergence;
    }
    write_checkpoint_meta(ckpt_dir, cfg, regime);
    log_info("train " + regime + ": checkpoints in " + ckpt_dir.string());
    return kOk;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& regime) {
    const ExperimentConfig cfg = load_effective(opts);
    const fs::path ds_dir = dataset_dir(cfg);
    if (!dataset_exists(ds_dir)) {
        std::fprintf(stderr, "fedstock: dataset not found in %s\n", ds_dir.string().c_str());
        return kMissingDataset;
    }
    const LoadedDataset loaded = load_dataset(ds_dir);
    const fs::path ckpt_dir = checkpoints_dir(cfg, regime);

    std::ifstream meta_in(ckpt_dir / "meta.json");
    if (!meta_in) {
        std::fprintf(stderr, "fedstock: no checkpoints for regime %s in %s\n", regime.c_str(),
                     ckpt_dir.string().c_str());
        return kMissingDataset;
    }
    json meta;
    meta_in >> meta;
    const std::string ckpt_hash = meta.at("config_hash").get<std::string>();
    if (ckpt_hash != loaded.meta.config_hash || ckpt_hash != config_hash(cfg)) {
        std::fprintf(stderr, "fedstock: config hash mismatch (dataset %s, checkpoint %s)\n",
                     loaded.meta.config_hash.c_str(), ckpt_hash.c_str());
        return kHashMismatch;
    }

    const auto clients = build_clients(loaded.data, loaded.meta.window);
    GrowthModel model(cfg.model);

    // Resolve the parameter set each farm is evaluated with.
    std::map<int, ParamSet> per_farm;
    ParamSet global;
    bool has_global = false;
    if (regime == "centralized" || regime == "fl" || regime == "fl-sqrt") {
        global = load_checkpoint(ckpt_dir / "global.ckpt");
        has_global = true;
    } else if (regime == "pfl" || regime == "pfl-sqrt") {
        const ParamSet body = load_checkpoint(ckpt_dir / "body.ckpt");
        for (const auto& c : clients) {
            const fs::path head_path = ckpt_dir / ("head_farm_" + std::to_string(c.farm_id) +
                                                   ".ckpt");
            if (fs::exists(head_path)) {
                per_farm.emplace(c.farm_id, merge_params(body, load_checkpoint(head_path)));
            }
        }
    } else if (regime == "local" || regime == "pfl-finetune") {
        for (const auto& c : clients) {
            const fs::path p = ckpt_dir / ("farm_" + std::to_string(c.farm_id) + ".ckpt");
            if (fs::exists(p)) per_farm.emplace(c.farm_id, load_checkpoint(p));
        }
        if (regime == "pfl-finetune" && fs::exists(ckpt_dir / "global.ckpt")) {
            global = load_checkpoint(ckpt_dir / "global.ckpt");
            has_global = true;
        }
    } else {
        std::fprintf(stderr, "fedstock: unknown regime %s\n", regime.c_str());
        return kBadConfig;
    }

    // Farms without a model of their own are skipped.
    std::vector<ClientDataset> evaluable;
    for (const auto& c : clients) {
        if (has_global || per_farm.count(c.farm_id)) evaluable.push_back(c);
    }
    const MetricsReport report = evaluate_clients(
        model, evaluable,
        [&](int farm_id) -> const ParamSet& {
            const auto it = per_farm.find(farm_id);
            return it != per_farm.end() ? it->second : global;
        },
        loaded.meta.normalization);

    json out = {{"tool_version", kToolVersion},
                {"config_hash", loaded.meta.config_hash},
                {"seed", cfg.seed},
                {"regime", regime},
                {"horizon", report.horizon},
                {"n_test_instances", report.n_instances},
                {"overall", quad_json(report.overall)}};
    json horizons = json::array();
    for (std::size_t h = 0; h < report.horizon_metrics.size(); ++h) {
        json hj = quad_json(report.horizon_metrics[h]);
        hj["horizon"] = h + 1;
        horizons.push_back(std::move(hj));
    }
    out["per_horizon"] = std::move(horizons);
    json farms = json::array();
    for (const auto& fm : report.per_farm) {
        json fj = quad_json(fm.q);
        fj["farm_id"] = fm.farm_id;
        fj["iam_count"] = fm.iam_count;
        fj["n_instances"] = fm.n_instances;
        farms.push_back(std::move(fj));
    }
    out["per_farm"] = std::move(farms);

    const fs::path rdir = reports_dir(cfg);
    write_text(rdir / ("metrics_" + regime + ".json"), out.dump(2) + "\n");

    std::string csv = "regime,scope,rmse_kg,mae_kg,mape_pct,r2\n";
    csv += regime + ",overall," + quad_csv(report.overall) + "\n";
    for (std::size_t h = 0; h < report.horizon_metrics.size(); ++h) {
        csv += regime + ",horizon_" + std::to_string(h + 1) + "," +
               quad_csv(report.horizon_metrics[h]) + "\n";
    }
    for (const auto& fm : report.per_farm) {
        csv += regime + ",farm_" + std::to_string(fm.farm_id) + "," + quad_csv(fm.q) + "\n";
    }
    write_text(rdir / ("metrics_" + regime + ".csv"), csv);
    log_info("evaluate " + regime + ": overall RMSE " + fmt(report.overall.rmse) + " kg");
    return kOk;
}

struct LoadedReport {
    std::string regime;
    int horizon = 0;
    json body;
};

int cmd_compare(const std::vector<std::string>& report_paths, const std::string& out_dir) {
    std::vector<LoadedReport> reports;
    for (const auto& path : report_paths) {
        std::ifstream in(path);
        if (!in) {
            std::fprintf(stderr, "fedstock: cannot open report %s\n", path.c_str());
            return kOther;
        }
        LoadedReport r;
        in >> r.body;
        r.regime = r.body.at("regime").get<std::string>();
        r.horizon = r.body.at("horizon").get<int>();
        reports.push_back(std::move(r));
    }
    for (const auto& r : reports) {
        if (r.horizon != reports.front().horizon) {
            std::fprintf(stderr, "fedstock: incompatible horizons (%d vs %d)\n", r.horizon,
                         reports.front().horizon);
            return kHorizonMismatch;
        }
    }

    // Consolidated rows: (regime, scope) -> quad + deltas vs the first report.
    struct Row {
        std::string regime;
        std::string scope;
        double rmse, mae, mape;
        std::optional<double> r2;
    };
    auto rows_of = [](const LoadedReport& r) {
        std::vector<Row> rows;
        auto push = [&](const std::string& scope, const json& q) {
            Row row;
            row.regime = r.regime;
            row.scope = scope;
            row.rmse = q.at("rmse_kg").get<double>();
            row.mae = q.at("mae_kg").get<double>();
            row.mape = q.at("mape_pct").get<double>();
            if (!q.at("r2").is_null()) row.r2 = q.at("r2").get<double>();
            rows.push_back(std::move(row));
        };
        push("overall", r.body.at("overall"));
        for (const auto& h : r.body.at("per_horizon")) {
            push("horizon_" + std::to_string(h.at("horizon").get<int>()), h);
        }
        for (const auto& f : r.body.at("per_farm")) {
            push("farm_" + std::to_string(f.at("farm_id").get<int>()), f);
        }
        return rows;
    };

    std::map<std::string, Row> baseline;
    for (auto& row : rows_of(reports.front())) baseline.emplace(row.scope, row);

    std::vector<Row> all;
    for (const auto& r : reports) {
        for (auto& row : rows_of(r)) all.push_back(std::move(row));
    }
    std::sort(all.begin(), all.end(), [](const Row& a, const Row& b) {
        return a.regime != b.regime ? a.regime < b.regime : a.scope < b.scope;
    });

    std::string csv =
        "regime,scope,rmse_kg,mae_kg,mape_pct,r2,delta_rmse_vs_" + reports.front().regime +
        ",delta_mae_vs_" + reports.front().regime + "\n";
    for (const auto& row : all) {
        csv += row.regime + "," + row.scope + "," + fmt(row.rmse) + "," + fmt(row.mae) + "," +
               fmt(row.mape) + "," + (row.r2 ? fmt(*row.r2) : std::string("NA"));
        const auto it = baseline.find(row.scope);
        if (it != baseline.end()) {
            csv += "," + fmt(row.rmse - it->second.rmse) + "," + fmt(row.mae - it->second.mae);
        } else {
            csv += ",NA,NA";
        }
        csv += "\n";
    }
    const fs::path out(out_dir);
    write_text(out / "comparison.csv", csv);

    // PFL vs local strata and the small-farm series, when both are present.
    auto find_regime = [&](const std::string& name) -> const LoadedReport* {
        for (const auto& r : reports) {
            if (r.regime == name) return &r;
        }
        return nullptr;
    };
    auto farm_metrics_of = [](const LoadedReport& r) {
        std::vector<FarmMetrics> out_metrics;
        for (const auto& f : r.body.at("per_farm")) {
            FarmMetrics fm;
            fm.farm_id = f.at("farm_id").get<int>();
            fm.iam_count = f.at("iam_count").get<int>();
            fm.n_instances = f.at("n_instances").get<std::size_t>();
            fm.q.rmse = f.at("rmse_kg").get<double>();
            fm.q.mae = f.at("mae_kg").get<double>();
            fm.q.mape_pct = f.at("mape_pct").get<double>();
            if (!f.at("r2").is_null()) fm.q.r2 = f.at("r2").get<double>();
            out_metrics.push_back(std::move(fm));
        }
        return out_metrics;
    };

    const LoadedReport* pfl = find_regime("pfl");
    if (pfl == nullptr) pfl = find_regime("pfl-sqrt");
    const LoadedReport* local = find_regime("local");
    if (pfl != nullptr && local != nullptr) {
        const auto pfl_farms = farm_metrics_of(*pfl);
        const auto local_farms = farm_metrics_of(*local);
        const StrataTable table = stratify_by_farm_size(pfl_farms, local_farms);

        std::string scsv = "bucket,farm_id,iam_count,pfl_rmse,local_rmse,improve\n";
        json sj = {{"buckets", json::array()}, {"omitted", table.omitted}};
        for (const auto& bucket : table.buckets) {
            for (const auto& row : bucket.farms) {
                scsv += bucket.bucket.label + "," + std::to_string(row.farm_id) + "," +
                        std::to_string(row.iam_count) + "," + fmt(row.pfl.rmse) + "," +
                        fmt(row.local.rmse) + "," + (row.improve ? "1" : "0") + "\n";
            }
            sj["buckets"].push_back({{"label", bucket.bucket.label},
                                     {"n_farms", bucket.farms.size()},
                                     {"improve_rate", bucket.improve_rate}});
        }
        write_text(out / "strata.csv", scsv);
        write_text(out / "strata.json", sj.dump(2) + "\n");

        std::string small = "farm_id,iam_count,pfl_rmse,local_rmse,pfl_mae,local_mae\n";
        std::vector<std::pair<int, std::string>> lines;
        for (const auto& p : pfl_farms) {
            if (p.iam_count >= 50) continue;
            const auto it = std::find_if(local_farms.begin(), local_farms.end(),
                                         [&](const FarmMetrics& l) { return l.farm_id == p.farm_id; });
            if (it == local_farms.end()) continue;
            lines.emplace_back(p.iam_count, std::to_string(p.farm_id) + "," +
                                                std::to_string(p.iam_count) + "," + fmt(p.q.rmse) +
                                                "," + fmt(it->q.rmse) + "," + fmt(p.q.mae) + "," +
                                                fmt(it->q.mae) + "\n");
        }
        std::sort(lines.begin(), lines.end());
        for (const auto& [iam, line] : lines) small += line;
        write_text(out / "small_farms.csv", small);
    }
    log_info("compare: wrote " + (out / "comparison.csv").string());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated livestock growth forecasting experiments"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string regime;
    std::vector<std::string> report_paths;
    std::string compare_out = ".";

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", opts.config_path, "experiment config JSON");
        if (needs_config) c->required();
        sub->add_option("--out", opts.out_override, "override output directory");
        sub->add_option("--seed", opts.seed_override, "override master seed");
        sub->add_option("--threads", opts.threads, "worker threads (default: hardware)");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    add_common(synth, true);

    CLI::App* train = app.add_subcommand("train", "train one regime");
    add_common(train, true);
    train->add_option("--regime", regime, "centralized|local|fl|fl-sqrt|pfl|pfl-sqrt|pfl-finetune")
        ->required()
        ->check(CLI::IsMember(kRegimes));

    CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a trained regime");
    add_common(evaluate, true);
    evaluate
        ->add_option("--regime", regime, "centralized|local|fl|fl-sqrt|pfl|pfl-sqrt|pfl-finetune")
        ->required()
        ->check(CLI::IsMember(kRegimes));

    CLI::App* compare = app.add_subcommand("compare", "consolidate evaluation reports");
    compare->add_option("reports", report_paths, "metrics_*.json files")
        ->required()
        ->expected(2, -1);
    compare->add_option("--out", compare_out, "output directory for comparison files");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(opts);
        if (train->parsed()) return cmd_train(opts, regime);
        if (evaluate->parsed()) return cmd_evaluate(opts, regime);
        if (compare->parsed()) return cmd_compare(report_paths, compare_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "fedstock: invalid config: %s\n", e.what());
        return kBadConfig;
    } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "fedstock: %s\n", e.what());
        return kDivergence;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fedstock: %s\n", e.what());
        return kOther;
    }
    return kOther;
}
