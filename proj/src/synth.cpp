#include "fedstock/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fedstock/errors.hpp"

namespace fedstock {

void FarmSpec::validate() const {
    const std::string base = "data.farms[" + std::to_string(farm_id) + "]";
    if (farm_id < 0) throw ConfigError(base + ".farm_id", "must be >= 0");
    if (n_animals < 1) throw ConfigError(base + ".n_animals", "must be >= 1");
    if (!(growth_bias > 0.0)) throw ConfigError(base + ".growth_bias", "must be > 0");
    if (!(obs_rate >= 1.0)) throw ConfigError(base + ".obs_rate", "must be >= 1");
    if (noise_sd < 0.0) throw ConfigError(base + ".noise_sd", "must be >= 0");
    if (region_id < 0) throw ConfigError(base + ".region_id", "must be >= 0");
    if (state_id < 0) throw ConfigError(base + ".state_id", "must be >= 0");
}

void GrowthCurveConfig::validate() const {
    if (!(mature_weight > 0.0)) throw ConfigError("data.growth.mature_weight", "must be > 0");
    if (!(shape_b > 0.0 && shape_b < 1.0)) throw ConfigError("data.growth.shape_b", "must be in (0, 1)");
    if (!(rate_k > 0.0)) throw ConfigError("data.growth.rate_k", "must be > 0");
    if (animal_factor_sigma < 0.0) throw ConfigError("data.growth.animal_factor_sigma", "must be >= 0");
}

void NormalizationSpec::validate() const {
    auto check = [](const Range& r, const char* field) {
        if (!(r.lo < r.hi)) {
            throw ConfigError(std::string("data.bounds.") + field, "min must be < max");
        }
    };
    check(weight, "weight");
    check(age, "age");
    check(distance, "distance");
    check(credibility, "credibility");
}

double NormalizationSpec::normalize(double v, const Range& r, long long* clipped) {
    double q = (v - r.lo) / (r.hi - r.lo);
    if (q < 0.0 || q > 1.0) {
        if (clipped != nullptr) ++*clipped;
        q = q < 0.0 ? 0.0 : 1.0;
    }
    return q;
}

double NormalizationSpec::denormalize(double q, const Range& r) { return r.lo + q * (r.hi - r.lo); }

void WindowConfig::validate() const {
    if (input_len < 1) throw ConfigError("data.window.input_len", "must be >= 1");
    if (horizon < 1) throw ConfigError("data.window.horizon", "must be >= 1");
    if (stride < 1) throw ConfigError("data.window.stride", "must be >= 1");
    if (input_len + horizon > kMonthCount) {
        throw ConfigError("data.window", "input_len + horizon must be <= " +
                                             std::to_string(kMonthCount));
    }
}

void DataConfig::validate() const {
    if (farms.empty()) throw ConfigError("data.farms", "must list at least one farm");
    std::set<int> ids;
    for (const auto& f : farms) {
        f.validate();
        if (!ids.insert(f.farm_id).second) {
            throw ConfigError("data.farms", "duplicate farm_id " + std::to_string(f.farm_id));
        }
    }
    growth.validate();
    normalization.validate();
    window.validate();
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("data.test_fraction", "must be in (0, 1)");
    }
}

double AnimalProfile::weight_at(double age_months) const {
    return asymptote * (1.0 - shape_b * std::exp(-rate_k * age_months));
}

std::vector<AnimalProfile> generate_population(const std::vector<FarmSpec>& farms,
                                               const GrowthCurveConfig& growth,
                                               std::uint64_t seed) {
    growth.validate();
    std::vector<FarmSpec> ordered = farms;
    std::sort(ordered.begin(), ordered.end(),
              [](const FarmSpec& a, const FarmSpec& b) { return a.farm_id < b.farm_id; });

    std::vector<AnimalProfile> population;
    for (const auto& farm : ordered) {
        farm.validate();
        for (int i = 0; i < farm.n_animals; ++i) {
            AnimalProfile animal;
            animal.animal_id = static_cast<std::int64_t>(farm.farm_id) * 100000 + i;
            animal.farm_id = farm.farm_id;
            Rng rng(derive_seed(seed, "animal", static_cast<std::uint64_t>(animal.animal_id)));
            animal.categories = {rng.uniform_int(0, kSexLevels - 1),
                                 rng.uniform_int(0, kBreedLevels - 1), farm.state_id,
                                 farm.region_id};
            const double factor = rng.lognormal(0.0, growth.animal_factor_sigma);
            animal.asymptote = farm.growth_bias * growth.mature_weight * factor;
            animal.shape_b = growth.shape_b;
            animal.rate_k = growth.rate_k;
            population.push_back(std::move(animal));
        }
    }
    return population;
}

std::vector<RawWeighing> sparsify(const AnimalProfile& animal, double obs_rate, double noise_sd,
                                  std::uint64_t seed) {
    if (!(obs_rate >= 1.0)) throw ConfigError("data.obs_rate", "must be >= 1");
    Rng rng(seed);
    int count = std::max(1, rng.poisson(obs_rate));
    count = std::min(count, kMonthCount);

    std::vector<int> ages(kMonthCount);
    for (int i = 0; i < kMonthCount; ++i) ages[i] = kFirstMonth + i;
    rng.shuffle(ages);
    ages.resize(static_cast<std::size_t>(count));
    std::sort(ages.begin(), ages.end());

    std::vector<RawWeighing> obs;
    obs.reserve(ages.size());
    for (int age : ages) {
        const double noisy = animal.weight_at(age) + rng.normal(0.0, noise_sd);
        obs.push_back({animal.animal_id, static_cast<double>(age), std::max(1.0, noisy)});
    }
    return obs;
}

AgeQuantiles AgeQuantiles::build(const std::vector<RawWeighing>& all_obs) {
    AgeQuantiles q;
    for (const auto& o : all_obs) {
        const int idx = static_cast<int>(std::llround(o.age_months)) - kFirstMonth;
        if (idx < 0 || idx >= kMonthCount) continue;
        q.sorted_[idx].push_back(o.weight_kg);
    }
    for (auto& bucket : q.sorted_) std::sort(bucket.begin(), bucket.end());
    return q;
}

int AgeQuantiles::nearest_populated(int month_index, RunReport* report) const {
    if (!sorted_[month_index].empty()) return month_index;
    for (int d = 1; d < kMonthCount; ++d) {
        const int lo = month_index - d;
        const int hi = month_index + d;
        if (lo >= 0 && !sorted_[lo].empty()) {
            if (report != nullptr) ++report->quantile_fallbacks;
            return lo;
        }
        if (hi < kMonthCount && !sorted_[hi].empty()) {
            if (report != nullptr) ++report->quantile_fallbacks;
            return hi;
        }
    }
    throw ArgumentError("quantile map has no observations at any age");
}

double AgeQuantiles::rank(int month_index, double weight, RunReport* report) const {
    const auto& v = sorted_[nearest_populated(month_index, report)];
    const std::size_t n = v.size();
    if (n == 1) return 0.5;
    if (weight <= v.front()) return 0.0;
    if (weight >= v.back()) return 1.0;
    const auto it = std::upper_bound(v.begin(), v.end(), weight);
    const std::size_t j = static_cast<std::size_t>(it - v.begin()) - 1;
    const double gap = v[j + 1] - v[j];
    const double frac = gap > 0.0 ? (weight - v[j]) / gap : 0.0;
    return (static_cast<double>(j) + frac) / static_cast<double>(n - 1);
}

double AgeQuantiles::weight_at_rank(int month_index, double q, RunReport* report) const {
    const auto& v = sorted_[nearest_populated(month_index, report)];
    const std::size_t n = v.size();
    if (n == 1) return v.front();
    const double clamped = q < 0.0 ? 0.0 : (q > 1.0 ? 1.0 : q);
    const double pos = clamped * static_cast<double>(n - 1);
    const auto j = static_cast<std::size_t>(pos);
    if (j + 1 >= n) return v.back();
    const double frac = pos - static_cast<double>(j);
    return v[j] + frac * (v[j + 1] - v[j]);
}

MonthlyTrajectory quantile_track_fill(const AnimalProfile& animal,
                                      const std::vector<RawWeighing>& obs,
                                      const AgeQuantiles& quantiles, RunReport* report) {
    if (obs.empty()) {
        throw ArgumentError("quantile_track_fill: animal " + std::to_string(animal.animal_id) +
                            " has no observations");
    }
    struct Anchor {
        int idx;
        double rank;
        double weight;
    };
    std::vector<Anchor> anchors;
    anchors.reserve(obs.size());
    for (const auto& o : obs) {
        const int idx = static_cast<int>(std::llround(o.age_months)) - kFirstMonth;
        if (idx < 0 || idx >= kMonthCount) {
            throw ArgumentError("observation age " + std::to_string(o.age_months) +
                                " outside the monthly grid");
        }
        if (!anchors.empty() && idx <= anchors.back().idx) {
            throw ArgumentError("observations must have strictly increasing ages");
        }
        anchors.push_back({idx, quantiles.rank(idx, o.weight_kg, report), o.weight_kg});
    }

    MonthlyTrajectory traj;
    traj.animal_id = animal.animal_id;
    traj.farm_id = animal.farm_id;
    traj.categories = animal.categories;

    std::size_t next = 0;  // first anchor with idx >= t
    for (int t = 0; t < kMonthCount; ++t) {
        while (next < anchors.size() && anchors[next].idx < t) ++next;
        double rank;
        if (next == 0) {
            rank = anchors.front().rank;
        } else if (next == anchors.size()) {
            rank = anchors.back().rank;
        } else if (anchors[next].idx == t) {
            rank = anchors[next].rank;
        } else {
            const Anchor& a = anchors[next - 1];
            const Anchor& b = anchors[next];
            const double frac = static_cast<double>(t - a.idx) / static_cast<double>(b.idx - a.idx);
            rank = a.rank + frac * (b.rank - a.rank);
        }
        traj.months[t].weight_kg = quantiles.weight_at_rank(t, rank, report);
        traj.months[t].observed = 0;
    }
    for (const auto& a : anchors) {
        traj.months[a.idx].weight_kg = a.weight;
        traj.months[a.idx].observed = 1;
    }
    return traj;
}

void annotate_distance_credibility(MonthlyTrajectory& traj) {
    std::vector<int> observed_idx;
    for (int t = 0; t < kMonthCount; ++t) {
        if (traj.months[t].observed) observed_idx.push_back(t);
    }
    if (observed_idx.empty()) {
        throw ArgumentError("annotate_distance_credibility: trajectory has no observed month");
    }
    for (int t = 0; t < kMonthCount; ++t) {
        int best = kMonthCount;
        for (int o : observed_idx) best = std::min(best, std::abs(t - o));
        traj.months[t].distance_months = static_cast<double>(best);
        traj.months[t].credibility = 1.0 / (1.0 + static_cast<double>(best));
    }
}

NormalizedTrajectory normalize(const MonthlyTrajectory& traj, const NormalizationSpec& spec,
                               RunReport* report) {
    spec.validate();
    long long* clipped = report != nullptr ? &report->clipped_values : nullptr;
    NormalizedTrajectory out;
    out.animal_id = traj.animal_id;
    out.farm_id = traj.farm_id;
    out.categories = traj.categories;
    for (int t = 0; t < kMonthCount; ++t) {
        const MonthSlot& s = traj.months[t];
        NormalizedSlot& n = out.months[t];
        n.weight = NormalizationSpec::normalize(s.weight_kg, spec.weight, clipped);
        n.age = NormalizationSpec::normalize(static_cast<double>(kFirstMonth + t), spec.age, clipped);
        n.distance = NormalizationSpec::normalize(s.distance_months, spec.distance, clipped);
        n.credibility = NormalizationSpec::normalize(s.credibility, spec.credibility, clipped);
        n.observed = s.observed;
    }
    return out;
}

std::vector<Instance> make_instances(const NormalizedTrajectory& traj,
                                     const WindowConfig& window) {
    window.validate();
    std::vector<Instance> out;
    const int span = window.input_len + window.horizon;
    for (int start = 0; start + span <= kMonthCount; start += window.stride) {
        Instance inst;
        const auto t_in = static_cast<std::size_t>(window.input_len);
        const auto horizon = static_cast<std::size_t>(window.horizon);
        inst.x = Tensor({t_in, 4});
        inst.m = Tensor({t_in, 1});
        inst.y = Tensor({horizon});
        for (std::size_t t = 0; t < t_in; ++t) {
            const NormalizedSlot& s = traj.months[start + static_cast<int>(t)];
            inst.x.at(t, 0) = s.weight;
            inst.x.at(t, 1) = s.age;
            inst.x.at(t, 2) = s.distance;
            inst.x.at(t, 3) = s.credibility;
            inst.m.at(t, 0) = static_cast<double>(s.observed);
        }
        for (std::size_t h = 0; h < horizon; ++h) {
            inst.y[h] = traj.months[start + window.input_len + static_cast<int>(h)].weight;
        }
        inst.categories = traj.categories;
        inst.farm_id = traj.farm_id;
        inst.animal_id = traj.animal_id;
        out.push_back(std::move(inst));
    }
    return out;
}

namespace {

// Per-farm shuffled animal assignment; `farm_animals` holds animal ids in
// their generation order.
std::map<std::int64_t, bool> assign_animals(
    const std::vector<std::pair<int, std::vector<std::int64_t>>>& farm_animals,
    double test_fraction, std::uint64_t seed, RunReport* report) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("data.test_fraction", "must be in (0, 1)");
    }
    std::map<std::int64_t, bool> assignment;
    for (const auto& [farm_id, ids] : farm_animals) {
        const std::size_t n = ids.size();
        if (n < 2) {
            for (auto id : ids) assignment[id] = false;
            if (report != nullptr) {
                report->flags.push_back("farm " + std::to_string(farm_id) +
                                        " too small to split; all animals kept in train");
            }
            continue;
        }
        std::vector<std::int64_t> shuffled = ids;
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(farm_id)));
        rng.shuffle(shuffled);
        auto n_test = static_cast<std::size_t>(
            std::llround(static_cast<double>(n) * test_fraction));
        n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
        for (std::size_t i = 0; i < n; ++i) assignment[shuffled[i]] = i < n_test;
    }
    return assignment;
}

}  // namespace

std::vector<ClientDataset> split_clients(const std::vector<Instance>& instances,
                                         const std::vector<FarmSpec>& farms, double test_fraction,
                                         std::uint64_t seed, RunReport* report,
                                         std::map<std::int64_t, bool>* assignment_out) {
    std::map<int, const FarmSpec*> spec_by_id;
    for (const auto& f : farms) spec_by_id[f.farm_id] = &f;

    // Animal ids per farm in first-appearance order.
    std::vector<std::pair<int, std::vector<std::int64_t>>> farm_animals;
    std::map<int, std::size_t> farm_slot;
    for (const auto& inst : instances) {
        auto [it, inserted] = farm_slot.try_emplace(inst.farm_id, farm_animals.size());
        if (inserted) farm_animals.emplace_back(inst.farm_id, std::vector<std::int64_t>{});
        auto& ids = farm_animals[it->second].second;
        if (std::find(ids.begin(), ids.end(), inst.animal_id) == ids.end()) {
            ids.push_back(inst.animal_id);
        }
    }
    std::sort(farm_animals.begin(), farm_animals.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    const auto assignment = assign_animals(farm_animals, test_fraction, seed, report);
    if (assignment_out != nullptr) *assignment_out = assignment;

    std::map<int, ClientDataset> clients;
    for (const auto& [farm_id, ids] : farm_animals) {
        ClientDataset& c = clients[farm_id];
        c.farm_id = farm_id;
        const auto it = spec_by_id.find(farm_id);
        c.n_animals = it != spec_by_id.end() ? it->second->n_animals
                                             : static_cast<int>(ids.size());
    }
    for (const auto& inst : instances) {
        ClientDataset& c = clients[inst.farm_id];
        if (assignment.at(inst.animal_id)) {
            c.test.push_back(inst);
        } else {
            c.train.push_back(inst);
        }
    }

    std::vector<ClientDataset> out;
    out.reserve(clients.size());
    for (auto& [id, c] : clients) out.push_back(std::move(c));
    return out;
}

SynthResult synthesize(const DataConfig& config, std::uint64_t seed) {
    config.validate();
    SynthResult result;

    const auto population = generate_population(config.farms, config.growth, seed);

    std::map<int, const FarmSpec*> spec_by_id;
    for (const auto& f : config.farms) spec_by_id[f.farm_id] = &f;

    std::vector<std::vector<RawWeighing>> per_animal_obs;
    per_animal_obs.reserve(population.size());
    std::vector<RawWeighing> pooled;
    for (const auto& animal : population) {
        const FarmSpec& farm = *spec_by_id.at(animal.farm_id);
        auto obs = sparsify(animal, farm.obs_rate, farm.noise_sd,
                            derive_seed(seed, "obs", static_cast<std::uint64_t>(animal.animal_id)));
        pooled.insert(pooled.end(), obs.begin(), obs.end());
        per_animal_obs.push_back(std::move(obs));
    }

    const AgeQuantiles quantiles = AgeQuantiles::build(pooled);

    std::vector<std::pair<int, std::vector<std::int64_t>>> farm_animals;
    std::map<int, std::size_t> farm_slot;
    std::vector<NormalizedTrajectory> trajectories;
    trajectories.reserve(population.size());
    for (std::size_t i = 0; i < population.size(); ++i) {
        const auto& animal = population[i];
        MonthlyTrajectory traj =
            quantile_track_fill(animal, per_animal_obs[i], quantiles, &result.report);
        annotate_distance_credibility(traj);
        trajectories.push_back(normalize(traj, config.normalization, &result.report));

        auto [it, inserted] = farm_slot.try_emplace(animal.farm_id, farm_animals.size());
        if (inserted) farm_animals.emplace_back(animal.farm_id, std::vector<std::int64_t>{});
        farm_animals[it->second].second.push_back(animal.animal_id);
    }
    std::sort(farm_animals.begin(), farm_animals.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    const auto assignment =
        assign_animals(farm_animals, config.test_fraction, seed, &result.report);

    std::map<int, FarmData> farms;
    for (const auto& f : config.farms) {
        farms[f.farm_id].spec = f;
    }
    for (auto& traj : trajectories) {
        FarmData& farm = farms.at(traj.farm_id);
        AnimalData animal;
        animal.is_test = assignment.at(traj.animal_id);
        animal.traj = std::move(traj);
        farm.animals.push_back(std::move(animal));
    }
    for (auto& [id, farm] : farms) result.farms.push_back(std::move(farm));
    return result;
}

std::vector<ClientDataset> build_clients(const SynthResult& result, const WindowConfig& window) {
    std::vector<ClientDataset> clients;
    clients.reserve(result.farms.size());
    for (const auto& farm : result.farms) {
        ClientDataset c;
        c.farm_id = farm.spec.farm_id;
        c.n_animals = farm.spec.n_animals;
        for (const auto& animal : farm.animals) {
            auto instances = make_instances(animal.traj, window);
            auto& side = animal.is_test ? c.test : c.train;
            for (auto& inst : instances) side.push_back(std::move(inst));
        }
        clients.push_back(std::move(c));
    }
    return clients;
}

}  // namespace fedstock
