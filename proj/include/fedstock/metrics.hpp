#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedstock/model.hpp"
#include "fedstock/synth.hpp"

namespace fedstock {

// RMSE / MAE / MAPE / R-score quadruple. R2 is absent when SS_tot is zero.
struct MetricQuad {
    double rmse = 0.0;
    double mae = 0.0;
    double mape_pct = 0.0;
    std::optional<double> r2;
};

// One evaluated sample: predicted means and actual targets, both in kg.
struct PredPair {
    Tensor predicted;
    Tensor actual;
};

// Metrics over the flattened (sample x horizon) set. MAPE skips zero targets.
MetricQuad metrics(const std::vector<PredPair>& pairs);

// Metrics restricted to each horizon index, h = 1..H.
std::vector<MetricQuad> per_horizon(const std::vector<PredPair>& pairs);

struct FarmMetrics {
    int farm_id = 0;
    int iam_count = 0;  // animals on the farm, the paper's farm-size unit
    std::size_t n_instances = 0;
    MetricQuad q;
};

struct MetricsReport {
    int horizon = 0;
    std::size_t n_instances = 0;
    MetricQuad overall;
    std::vector<MetricQuad> horizon_metrics;  // exactly `horizon` entries
    std::vector<FarmMetrics> per_farm;        // ascending farm_id
};

// Inclusive IAM range; hi < 0 means unbounded.
struct SizeBucket {
    std::string label;
    int lo = 0;
    int hi = -1;
};

std::vector<SizeBucket> default_size_buckets();

struct StratumFarmRow {
    int farm_id = 0;
    int iam_count = 0;
    MetricQuad pfl;
    MetricQuad local;
    bool improve = false;  // 1 iff PFL RMSE < local RMSE
};

struct StratumSummary {
    SizeBucket bucket;
    std::vector<StratumFarmRow> farms;
    double improve_rate = 0.0;
};

struct StrataTable {
    std::vector<StratumSummary> buckets;    // non-empty buckets only
    std::vector<std::string> omitted;       // labels of empty buckets
};

// Per-bucket PFL vs local-only comparison over farms present in both reports.
StrataTable stratify_by_farm_size(const std::vector<FarmMetrics>& pfl,
                                  const std::vector<FarmMetrics>& local,
                                  const std::vector<SizeBucket>& buckets = default_size_buckets());

// Runs the model over every farm's test instances (with the parameter set
// the resolver assigns to that farm), denormalizes to kg, and assembles the
// full report. Farms without test instances are skipped in per_farm.
MetricsReport evaluate_clients(const GrowthModel& model, const std::vector<ClientDataset>& clients,
                               const std::function<const ParamSet&(int)>& params_for_farm,
                               const NormalizationSpec& norm);

}  // namespace fedstock
