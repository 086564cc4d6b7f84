#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedstock/model.hpp"
#include "fedstock/rng.hpp"

namespace fedstock {

// Monthly grid: ages 2..24 months inclusive, one slot per integer age.
inline constexpr int kFirstMonth = 2;
inline constexpr int kLastMonth = 24;
inline constexpr int kMonthCount = kLastMonth - kFirstMonth + 1;  // 23

// Category levels emitted by the generator for the two per-animal features.
inline constexpr int kSexLevels = 3;
inline constexpr int kBreedLevels = 6;

struct FarmSpec {
    int farm_id = 0;
    int n_animals = 1;
    int region_id = 0;
    int state_id = 0;
    double growth_bias = 1.0;  // multiplier on mature weight
    double noise_sd = 10.0;    // kg, measurement noise at observation time
    double obs_rate = 2.5;     // expected weighings per animal

    void validate() const;
};

// Brody growth form w(a) = A (1 - b e^{-k a}); A varies per animal.
struct GrowthCurveConfig {
    double mature_weight = 650.0;     // A0, kg
    double shape_b = 0.9;
    double rate_k = 0.08;             // per month
    double animal_factor_sigma = 0.1; // lognormal(0, sigma^2) spread of A

    void validate() const;
};

struct AnimalProfile {
    std::int64_t animal_id = 0;
    int farm_id = 0;
    std::vector<int> categories;  // sex, breed, state, nrm_region
    double asymptote = 0.0;       // A = growth_bias * A0 * animal_factor
    double shape_b = 0.9;
    double rate_k = 0.08;

    double weight_at(double age_months) const;
};

struct RawWeighing {
    std::int64_t animal_id = 0;
    double age_months = 0.0;  // integer-valued on the monthly grid
    double weight_kg = 0.0;
};

struct MonthSlot {
    double weight_kg = 0.0;
    int observed = 0;
    double distance_months = 0.0;
    double credibility = 1.0;
};

struct MonthlyTrajectory {
    std::int64_t animal_id = 0;
    int farm_id = 0;
    std::vector<int> categories;
    std::array<MonthSlot, kMonthCount> months{};
};

struct NormalizationSpec {
    struct Range {
        double lo = 0.0;
        double hi = 1.0;
    };
    Range weight{0.0, 1000.0};
    Range age{2.0, 24.0};
    Range distance{0.0, 22.0};
    Range credibility{0.0, 1.0};

    void validate() const;
    // (v - lo) / (hi - lo), clipped to [0, 1]. Increments *clipped when the
    // input fell outside the bounds.
    static double normalize(double v, const Range& r, long long* clipped = nullptr);
    static double denormalize(double q, const Range& r);
};

struct WindowConfig {
    int input_len = 12;
    int horizon = 3;
    int stride = 3;

    void validate() const;
};

// Events worth surfacing from a generation run.
struct RunReport {
    long long quantile_fallbacks = 0;
    long long clipped_values = 0;
    std::vector<std::string> flags;
};

struct NormalizedSlot {
    double weight = 0.0;
    double age = 0.0;
    double distance = 0.0;
    double credibility = 0.0;
    int observed = 0;
};

struct NormalizedTrajectory {
    std::int64_t animal_id = 0;
    int farm_id = 0;
    std::vector<int> categories;
    std::array<NormalizedSlot, kMonthCount> months{};
};

// Age-conditional empirical quantile maps built from the pooled raw
// weighings: per integer age, the sorted observed weights with linear
// interpolation between order statistics.
class AgeQuantiles {
public:
    static AgeQuantiles build(const std::vector<RawWeighing>& all_obs);

    // Quantile rank of `weight` among the observations at `month_index`.
    double rank(int month_index, double weight, RunReport* report = nullptr) const;
    // Inverse map: weight at quantile `q` for `month_index`.
    double weight_at_rank(int month_index, double q, RunReport* report = nullptr) const;

    bool bucket_empty(int month_index) const { return sorted_[month_index].empty(); }

private:
    int nearest_populated(int month_index, RunReport* report) const;
    std::array<std::vector<double>, kMonthCount> sorted_{};
};

// --- generation pipeline -------------------------------------------------

std::vector<AnimalProfile> generate_population(const std::vector<FarmSpec>& farms,
                                               const GrowthCurveConfig& growth,
                                               std::uint64_t seed);

// Draws max(1, Poisson(obs_rate)) distinct integer-month ages uniformly and
// emits noisy weighings sorted by age.
std::vector<RawWeighing> sparsify(const AnimalProfile& animal, double obs_rate, double noise_sd,
                                  std::uint64_t seed);

// Quantile-track inter/extrapolation: each observation becomes a quantile
// rank at its age; ranks are linearly interpolated between observations and
// held constant beyond the first/last one; every month's weight is the
// population quantile at the interpolated rank. Observed months keep their
// raw weight exactly.
MonthlyTrajectory quantile_track_fill(const AnimalProfile& animal,
                                      const std::vector<RawWeighing>& obs,
                                      const AgeQuantiles& quantiles, RunReport* report = nullptr);

// distance(t) = min over observed ages t* of |t - t*|; credibility 1/(1+d).
void annotate_distance_credibility(MonthlyTrajectory& traj);

NormalizedTrajectory normalize(const MonthlyTrajectory& traj, const NormalizationSpec& spec,
                               RunReport* report = nullptr);

// Sliding windows: input steps t..t+input_len-1, targets the next `horizon`
// months, advancing by `stride`.
std::vector<Instance> make_instances(const NormalizedTrajectory& traj, const WindowConfig& window);

// --- dataset assembly -----------------------------------------------------

struct DataConfig {
    std::vector<FarmSpec> farms;
    GrowthCurveConfig growth;
    NormalizationSpec normalization;
    WindowConfig window;
    double test_fraction = 0.2;

    void validate() const;
};

struct AnimalData {
    NormalizedTrajectory traj;
    bool is_test = false;
};

struct FarmData {
    FarmSpec spec;
    std::vector<AnimalData> animals;
};

struct SynthResult {
    std::vector<FarmData> farms;  // ascending farm_id
    RunReport report;
};

// Full pipeline: population -> sparsify -> quantile fill -> annotate ->
// normalize -> per-animal train/test assignment. Deterministic per seed.
SynthResult synthesize(const DataConfig& config, std::uint64_t seed);

struct ClientDataset {
    int farm_id = 0;
    int n_animals = 0;  // IAM count of the farm
    std::vector<Instance> train;
    std::vector<Instance> test;
};

// Windows every animal and splits instances by animal, stratified per farm.
// Every farm retains at least one training animal; farms too small to give
// both sides keep everything in train (flagged in the report).
std::vector<ClientDataset> split_clients(const std::vector<Instance>& instances,
                                         const std::vector<FarmSpec>& farms, double test_fraction,
                                         std::uint64_t seed, RunReport* report = nullptr,
                                         std::map<std::int64_t, bool>* assignment_out = nullptr);

// Materializes ClientDatasets from a SynthResult via make_instances.
std::vector<ClientDataset> build_clients(const SynthResult& result, const WindowConfig& window);

}  // namespace fedstock
