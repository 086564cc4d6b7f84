#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedstock/model.hpp"
#include "fedstock/params.hpp"

namespace fedstock {

// How client updates are weighted at the server: by sample count n_k / N, or
// by sqrt(n_k) / sum_j sqrt(n_j) to curb the dominance of very large farms.
enum class AggregationPolicy { Size, Sqrt };

struct FederationConfig {
    int rounds = 30;
    int local_epochs = 2;
    double learning_rate = 0.02;
    AggregationPolicy policy = AggregationPolicy::Size;
    std::uint64_t seed = 0;
    double participation = 1.0;        // fraction of clients drawn each round
    int finetune_epochs = 2;           // second phase of pfl-finetune
    double validation_fraction = 0.0;  // per-client train holdout, 0 disables
    int threads = 1;

    void validate() const;
};

// One farm's private training data. The dataset never leaves this struct;
// only parameter sets travel.
struct ClientState {
    int client_id = 0;
    int n_animals = 0;
    std::vector<Instance> train;
};

// SIZE: n_k / N. SQRT: sqrt(n_k) / sum_j sqrt(n_j). Output order matches input.
std::vector<double> compute_weights(AggregationPolicy policy,
                                    const std::vector<std::size_t>& sizes);

// Weighted sum of structurally identical parameter sets, accumulated in the
// order given (callers pass ascending client id for bit-determinism).
ParamSet aggregate(const std::vector<const ParamSet*>& params,
                   const std::vector<double>& weights);

// body + head concatenated in canonical order (body first).
ParamSet merge_params(const ParamSet& body, const ParamSet& head);

// E epochs of per-instance SGD over the client's data in a seeded shuffled
// order. Inputs are taken by value copy; the client's previous parameters are
// never mutated. A non-finite loss raises TrainingDivergence naming the
// client and epoch.
struct LocalTrainResult {
    ParamSet body;
    ParamSet head;
    std::vector<double> epoch_losses;  // mean per-instance loss per epoch
};

LocalTrainResult local_train(const ClientState& client, const ParamSet& body,
                             const ParamSet& head, const GrowthModel& model, int epochs,
                             double learning_rate, std::uint64_t master_seed, int round);

// Records every parameter path that enters a server-side structure. The PFL
// privacy contract is that no HEAD-tagged tensor is ever recorded.
struct ServerAudit {
    std::vector<std::string> paths;
    bool saw_head = false;

    void record(const ParamSet& params) {
        for (const auto& p : params.params()) {
            paths.push_back(p.name);
            if (p.partition == Partition::Head) saw_head = true;
        }
    }
};

struct RoundRecord {
    int round = 0;
    std::vector<int> client_ids;        // participants, ascending
    std::vector<double> weights;        // aggregation weights (post-exclusion)
    std::vector<double> client_losses;  // last-epoch mean loss per participant
    std::vector<int> excluded;          // clients dropped for divergence
    double mean_loss = 0.0;
    std::optional<double> val_rmse;     // normalized units, when validation is on
    double wall_ms = 0.0;
};

struct FlResult {
    ParamSet global;
    std::vector<RoundRecord> rounds;
};

struct PflResult {
    ParamSet body;
    std::map<int, ParamSet> heads;  // client id -> private head
    std::vector<RoundRecord> rounds;
};

struct CentralResult {
    ParamSet params;
    std::vector<double> epoch_losses;
};

struct LocalOnlyResult {
    std::map<int, ParamSet> models;
    std::map<int, std::vector<double>> traces;
    std::vector<int> diverged;
};

struct PflFinetuneResult {
    ParamSet global;                 // FL phase result
    std::map<int, ParamSet> models;  // per-client fine-tuned full models
    std::vector<RoundRecord> rounds;
    std::vector<int> diverged;  // clients evaluated with the global model
};

// FedAvg: broadcast -> local train -> size/sqrt-weighted aggregate, R rounds.
FlResult run_fl(const FederationConfig& cfg, const std::vector<ClientState>& clients,
                const GrowthModel& model, ServerAudit* audit = nullptr);

// Personalized FL: the server holds and aggregates the shared body only;
// each client restores its persisted private head at round start.
PflResult run_pfl(const FederationConfig& cfg, const std::vector<ClientState>& clients,
                  const GrowthModel& model, ServerAudit* audit = nullptr);

// Pools every client's data and runs R * E epochs of seeded-shuffle SGD.
CentralResult run_centralized(const FederationConfig& cfg,
                              const std::vector<ClientState>& clients, const GrowthModel& model);

// Each client trains an independent model from its own seed-derived
// initialization; no communication.
LocalOnlyResult run_local_only(const FederationConfig& cfg,
                               const std::vector<ClientState>& clients, const GrowthModel& model);

// Trains FL fully, then fine-tunes body+head per client for finetune_epochs.
PflFinetuneResult run_pfl_finetune(const FederationConfig& cfg,
                                   const std::vector<ClientState>& clients,
                                   const GrowthModel& model);

}  // namespace fedstock
