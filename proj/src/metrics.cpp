#include "fedstock/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "fedstock/errors.hpp"

namespace fedstock {

namespace {

MetricQuad metrics_flat(const std::vector<double>& predicted, const std::vector<double>& actual) {
    const std::size_t n = predicted.size();
    if (n == 0) throw ArgumentError("metrics: no prediction pairs");

    double sq = 0.0;
    double abs_sum = 0.0;
    double mape_sum = 0.0;
    std::size_t mape_n = 0;
    double mean_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double err = predicted[i] - actual[i];
        sq += err * err;
        abs_sum += std::abs(err);
        if (actual[i] != 0.0) {
            mape_sum += std::abs(err) / std::abs(actual[i]);
            ++mape_n;
        }
        mean_y += actual[i];
    }
    mean_y /= static_cast<double>(n);

    MetricQuad q;
    q.rmse = std::sqrt(sq / static_cast<double>(n));
    q.mae = abs_sum / static_cast<double>(n);
    q.mape_pct = mape_n > 0 ? 100.0 * mape_sum / static_cast<double>(mape_n) : 0.0;

    if (n >= 2) {
        double ss_tot = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = actual[i] - mean_y;
            ss_tot += d * d;
        }
        if (ss_tot > 0.0) q.r2 = 1.0 - sq / ss_tot;
    }
    return q;
}

void flatten(const std::vector<PredPair>& pairs, std::vector<double>& predicted,
             std::vector<double>& actual) {
    for (const auto& p : pairs) {
        if (!p.predicted.same_shape(p.actual)) {
            throw DimensionError("metrics: prediction " + p.predicted.shape_string() +
                                 " vs actual " + p.actual.shape_string());
        }
        for (std::size_t h = 0; h < p.predicted.size(); ++h) {
            predicted.push_back(p.predicted[h]);
            actual.push_back(p.actual[h]);
        }
    }
}

}  // namespace

MetricQuad metrics(const std::vector<PredPair>& pairs) {
    std::vector<double> predicted;
    std::vector<double> actual;
    flatten(pairs, predicted, actual);
    return metrics_flat(predicted, actual);
}

std::vector<MetricQuad> per_horizon(const std::vector<PredPair>& pairs) {
    if (pairs.empty()) throw ArgumentError("per_horizon: no prediction pairs");
    const std::size_t horizon = pairs.front().predicted.size();
    std::vector<MetricQuad> out;
    out.reserve(horizon);
    for (std::size_t h = 0; h < horizon; ++h) {
        std::vector<double> predicted;
        std::vector<double> actual;
        predicted.reserve(pairs.size());
        actual.reserve(pairs.size());
        for (const auto& p : pairs) {
            if (p.predicted.size() != horizon) {
                throw DimensionError("per_horizon: inconsistent horizon lengths");
            }
            predicted.push_back(p.predicted[h]);
            actual.push_back(p.actual[h]);
        }
        out.push_back(metrics_flat(predicted, actual));
    }
    return out;
}

std::vector<SizeBucket> default_size_buckets() {
    return {
        {"<50", 1, 50},
        {"51-200", 51, 200},
        {"201-500", 201, 500},
        {"501-1000", 501, 1000},
        {">1000", 1001, -1},
    };
}

StrataTable stratify_by_farm_size(const std::vector<FarmMetrics>& pfl,
                                  const std::vector<FarmMetrics>& local,
                                  const std::vector<SizeBucket>& buckets) {
    StrataTable table;
    for (const auto& bucket : buckets) {
        StratumSummary summary;
        summary.bucket = bucket;
        std::size_t improved = 0;
        for (const auto& p : pfl) {
            if (p.iam_count < bucket.lo || (bucket.hi >= 0 && p.iam_count > bucket.hi)) continue;
            const auto it = std::find_if(local.begin(), local.end(), [&](const FarmMetrics& l) {
                return l.farm_id == p.farm_id;
            });
            if (it == local.end()) continue;
            StratumFarmRow row;
            row.farm_id = p.farm_id;
            row.iam_count = p.iam_count;
            row.pfl = p.q;
            row.local = it->q;
            row.improve = p.q.rmse < it->q.rmse;
            if (row.improve) ++improved;
            summary.farms.push_back(std::move(row));
        }
        if (summary.farms.empty()) {
            table.omitted.push_back(bucket.label);
            continue;
        }
        std::sort(summary.farms.begin(), summary.farms.end(),
                  [](const StratumFarmRow& a, const StratumFarmRow& b) {
                      return a.iam_count != b.iam_count ? a.iam_count < b.iam_count
                                                        : a.farm_id < b.farm_id;
                  });
        summary.improve_rate =
            static_cast<double>(improved) / static_cast<double>(summary.farms.size());
        table.buckets.push_back(std::move(summary));
    }
    return table;
}

MetricsReport evaluate_clients(const GrowthModel& model, const std::vector<ClientDataset>& clients,
                               const std::function<const ParamSet&(int)>& params_for_farm,
                               const NormalizationSpec& norm) {
    MetricsReport report;
    report.horizon = model.config().horizon;

    std::vector<PredPair> all_pairs;
    std::vector<const ClientDataset*> ordered;
    for (const auto& c : clients) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(), [](const ClientDataset* a, const ClientDataset* b) {
        return a->farm_id < b->farm_id;
    });

    Graph scratch;
    for (const ClientDataset* client : ordered) {
        if (client->test.empty()) continue;
        const ParamSet& params = params_for_farm(client->farm_id);
        std::vector<PredPair> farm_pairs;
        farm_pairs.reserve(client->test.size());
        for (const auto& inst : client->test) {
            const Prediction pred = model.predict(inst, params, scratch);
            PredPair pair;
            pair.predicted = Tensor(pred.mu.shape());
            pair.actual = Tensor(inst.y.shape());
            for (std::size_t h = 0; h < pred.mu.size(); ++h) {
                pair.predicted[h] = NormalizationSpec::denormalize(pred.mu[h], norm.weight);
                pair.actual[h] = NormalizationSpec::denormalize(inst.y[h], norm.weight);
            }
            farm_pairs.push_back(std::move(pair));
        }
        FarmMetrics fm;
        fm.farm_id = client->farm_id;
        fm.iam_count = client->n_animals;
        fm.n_instances = farm_pairs.size();
        fm.q = metrics(farm_pairs);
        report.per_farm.push_back(std::move(fm));
        all_pairs.insert(all_pairs.end(), farm_pairs.begin(), farm_pairs.end());
    }

    if (all_pairs.empty()) throw ArgumentError("evaluate_clients: no test instances");
    report.n_instances = all_pairs.size();
    report.overall = metrics(all_pairs);
    report.horizon_metrics = per_horizon(all_pairs);
    return report;
}

}  // namespace fedstock
