#include "fedstock/fl.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "fedstock/errors.hpp"
#include "fedstock/rng.hpp"

namespace fedstock {

void FederationConfig::validate() const {
    if (rounds < 1) throw ConfigError("training.rounds", "must be >= 1");
    if (local_epochs < 1) throw ConfigError("training.local_epochs", "must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate", "must be > 0");
    if (!(participation > 0.0 && participation <= 1.0)) {
        throw ConfigError("training.participation", "must be in (0, 1]");
    }
    if (finetune_epochs < 1) throw ConfigError("training.finetune_epochs", "must be >= 1");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw ConfigError("training.validation_fraction", "must be in [0, 1)");
    }
    if (threads < 1) throw ConfigError("training.threads", "must be >= 1");
}

std::vector<double> compute_weights(AggregationPolicy policy,
                                    const std::vector<std::size_t>& sizes) {
    if (sizes.empty()) throw ArgumentError("compute_weights: empty size list");
    std::vector<double> raw(sizes.size());
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1) throw ArgumentError("compute_weights: sizes must be >= 1");
        const auto n = static_cast<double>(sizes[i]);
        raw[i] = policy == AggregationPolicy::Sqrt ? std::sqrt(n) : n;
    }
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    for (double& w : raw) w /= total;
    return raw;
}

ParamSet aggregate(const std::vector<const ParamSet*>& params,
                   const std::vector<double>& weights) {
    if (params.empty()) throw ArgumentError("aggregate: no parameter sets");
    if (params.size() != weights.size()) {
        throw ArgumentError("aggregate: " + std::to_string(params.size()) + " sets but " +
                            std::to_string(weights.size()) + " weights");
    }
    std::string mismatch;
    for (std::size_t k = 1; k < params.size(); ++k) {
        if (!params[0]->same_structure(*params[k], &mismatch)) {
            throw ProtocolError("aggregate: structural mismatch at parameter " + mismatch);
        }
    }
    ParamSet out;
    for (const auto& p : params[0]->params()) {
        out.add(p.name, Tensor::zeros(p.value.shape()), p.partition);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double w = weights[k];
        auto& dst = out.params();
        const auto& src = params[k]->params();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            double* d = dst[i].value.data();
            const double* s = src[i].value.data();
            const std::size_t n = dst[i].value.size();
            for (std::size_t j = 0; j < n; ++j) d[j] += w * s[j];
        }
    }
    return out;
}

ParamSet merge_params(const ParamSet& body, const ParamSet& head) {
    ParamSet out;
    for (const auto& p : body.params()) out.add(p.name, p.value, p.partition);
    for (const auto& p : head.params()) out.add(p.name, p.value, p.partition);
    return out;
}

LocalTrainResult local_train(const ClientState& client, const ParamSet& body,
                             const ParamSet& head, const GrowthModel& model, int epochs,
                             double learning_rate, std::uint64_t master_seed, int round) {
    if (epochs < 1) throw ConfigError("training.local_epochs", "must be >= 1");
    if (client.train.empty()) {
        throw ArgumentError("local_train: client " + std::to_string(client.client_id) +
                            " has no training data");
    }
    ParamSet working = merge_params(body, head);
    working.zero_grads();

    const std::size_t n = client.train.size();
    std::vector<std::size_t> order(n);
    std::vector<double> epoch_losses;
    epoch_losses.reserve(static_cast<std::size_t>(epochs));
    Graph scratch;

    for (int e = 1; e <= epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(master_seed, "shuffle", static_cast<std::uint64_t>(client.client_id),
                            static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(e)));
        rng.shuffle(order);
        double total = 0.0;
        for (std::size_t idx : order) {
            double loss;
            try {
                loss = model.loss_backward(client.train[idx], working, scratch);
                sgd_step(working, learning_rate);
            } catch (const NumericError& err) {
                throw TrainingDivergence(client.client_id, e,
                                         "client " + std::to_string(client.client_id) +
                                             " diverged at epoch " + std::to_string(e) + ": " +
                                             err.what());
            }
            if (!std::isfinite(loss)) {
                throw TrainingDivergence(client.client_id, e,
                                         "client " + std::to_string(client.client_id) +
                                             " diverged at epoch " + std::to_string(e) +
                                             ": non-finite loss");
            }
            total += loss;
        }
        epoch_losses.push_back(total / static_cast<double>(n));
    }

    LocalTrainResult result;
    result.body = working.filter(Partition::Body);
    result.head = working.filter(Partition::Head);
    result.epoch_losses = std::move(epoch_losses);
    return result;
}

namespace {

// Deterministic parallel map over client indices: worker count never affects
// results because each index does independent work into its own slot.
void parallel_for(int threads, std::size_t count, const std::function<void(std::size_t)>& fn) {
    const int workers = std::min<int>(threads, static_cast<int>(count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

struct ClientOutcome {
    std::optional<LocalTrainResult> result;
    std::optional<TrainingDivergence> divergence;
    std::exception_ptr error;
};

std::vector<ClientState> sorted_clients(const std::vector<ClientState>& clients,
                                        const char* op) {
    if (clients.empty()) throw ArgumentError(std::string(op) + ": at least one client required");
    std::set<int> ids;
    for (const auto& c : clients) {
        if (!ids.insert(c.client_id).second) {
            throw ArgumentError(std::string(op) + ": duplicate client id " +
                                std::to_string(c.client_id));
        }
        if (c.train.empty()) {
            throw ArgumentError(std::string(op) + ": client " + std::to_string(c.client_id) +
                                " has no training data");
        }
    }
    std::vector<ClientState> out = clients;
    std::sort(out.begin(), out.end(),
              [](const ClientState& a, const ClientState& b) { return a.client_id < b.client_id; });
    return out;
}

struct ValidationSplit {
    std::vector<ClientState> train;                   // clients with holdout removed
    std::map<int, std::vector<Instance>> val_by_client;
    bool enabled = false;
};

ValidationSplit carve_validation(const std::vector<ClientState>& clients,
                                 const FederationConfig& cfg) {
    ValidationSplit split;
    if (cfg.validation_fraction <= 0.0) {
        split.train = clients;
        return split;
    }
    split.enabled = true;
    for (const auto& client : clients) {
        std::vector<std::int64_t> animals;
        for (const auto& inst : client.train) {
            if (std::find(animals.begin(), animals.end(), inst.animal_id) == animals.end()) {
                animals.push_back(inst.animal_id);
            }
        }
        std::set<std::int64_t> held;
        if (animals.size() >= 2) {
            Rng rng(derive_seed(cfg.seed, "val", static_cast<std::uint64_t>(client.client_id)));
            rng.shuffle(animals);
            auto k = static_cast<std::size_t>(std::llround(
                static_cast<double>(animals.size()) * cfg.validation_fraction));
            k = std::clamp<std::size_t>(k, 1, animals.size() - 1);
            held.insert(animals.begin(), animals.begin() + static_cast<std::ptrdiff_t>(k));
        }
        ClientState reduced;
        reduced.client_id = client.client_id;
        reduced.n_animals = client.n_animals;
        for (const auto& inst : client.train) {
            if (held.count(inst.animal_id)) {
                split.val_by_client[client.client_id].push_back(inst);
            } else {
                reduced.train.push_back(inst);
            }
        }
        split.train.push_back(std::move(reduced));
    }
    return split;
}

double validation_rmse(const GrowthModel& model,
                       const std::map<int, std::vector<Instance>>& val_by_client,
                       const std::function<const ParamSet&(int)>& params_for) {
    double sq = 0.0;
    std::size_t n = 0;
    Graph scratch;
    for (const auto& [client_id, instances] : val_by_client) {
        const ParamSet& params = params_for(client_id);
        for (const auto& inst : instances) {
            const Prediction pred = model.predict(inst, params, scratch);
            for (std::size_t h = 0; h < inst.y.size(); ++h) {
                const double d = pred.mu[h] - inst.y[h];
                sq += d * d;
                ++n;
            }
        }
    }
    return n > 0 ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
}

std::vector<std::size_t> participating_indices(const FederationConfig& cfg, std::size_t count,
                                               int round) {
    std::vector<std::size_t> all(count);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (cfg.participation >= 1.0 || count <= 1) return all;
    auto take = static_cast<std::size_t>(
        std::ceil(cfg.participation * static_cast<double>(count)));
    take = std::clamp<std::size_t>(take, 1, count);
    Rng rng(derive_seed(cfg.seed, "participation", static_cast<std::uint64_t>(round)));
    rng.shuffle(all);
    all.resize(take);
    std::sort(all.begin(), all.end());
    return all;
}

// Runs one federated round over the given clients. `body_of`/`head_of`
// produce the parameters broadcast to a client; `on_result` consumes each
// successful update in ascending client order.
RoundRecord run_round(const FederationConfig& cfg, const std::vector<ClientState>& clients,
                      const GrowthModel& model, int round,
                      const std::function<ParamSet(int)>& body_of,
                      const std::function<ParamSet(int)>& head_of,
                      const std::function<void(const ClientState&, LocalTrainResult&&)>& on_result,
                      std::vector<std::size_t>* included_out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto picked = participating_indices(cfg, clients.size(), round);

    std::vector<ClientOutcome> outcomes(picked.size());
    parallel_for(cfg.threads, picked.size(), [&](std::size_t i) {
        const ClientState& client = clients[picked[i]];
        try {
            // Broadcast by value: the client trains on copies.
            outcomes[i].result = local_train(client, body_of(client.client_id),
                                             head_of(client.client_id), model, cfg.local_epochs,
                                             cfg.learning_rate, cfg.seed, round);
        } catch (const TrainingDivergence& d) {
            outcomes[i].divergence = d;
        } catch (...) {
            outcomes[i].error = std::current_exception();
        }
    });
    for (const auto& o : outcomes) {
        if (o.error) std::rethrow_exception(o.error);
    }

    RoundRecord record;
    record.round = round;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t i = 0; i < picked.size(); ++i) {
        const ClientState& client = clients[picked[i]];
        record.client_ids.push_back(client.client_id);
        if (outcomes[i].divergence) {
            record.excluded.push_back(client.client_id);
            record.client_losses.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        record.client_losses.push_back(outcomes[i].result->epoch_losses.back());
        loss_sum += outcomes[i].result->epoch_losses.back();
        ++loss_count;
    }
    if (loss_count == 0) {
        throw ProtocolError("round " + std::to_string(round) + ": every client diverged");
    }
    record.mean_loss = loss_sum / static_cast<double>(loss_count);

    for (std::size_t i = 0; i < picked.size(); ++i) {
        if (outcomes[i].divergence) continue;
        if (included_out != nullptr) included_out->push_back(picked[i]);
        on_result(clients[picked[i]], std::move(*outcomes[i].result));
    }

    record.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    return record;
}

}  // namespace

FlResult run_fl(const FederationConfig& cfg, const std::vector<ClientState>& clients_in,
                const GrowthModel& model, ServerAudit* audit) {
    cfg.validate();
    const auto clients_sorted = sorted_clients(clients_in, "run_fl");
    const auto split = carve_validation(clients_sorted, cfg);
    const auto& clients = split.train;

    FlResult out;
    out.global = model.init_params(cfg.seed);
    if (audit != nullptr) audit->record(out.global);

    for (int r = 1; r <= cfg.rounds; ++r) {
        std::vector<std::pair<int, ParamSet>> updates;  // ascending client id
        std::vector<std::size_t> included;
        RoundRecord record = run_round(
            cfg, clients, model, r,
            [&](int) { return out.global.filter(Partition::Body); },
            [&](int) { return out.global.filter(Partition::Head); },
            [&](const ClientState& client, LocalTrainResult&& res) {
                updates.emplace_back(client.client_id, merge_params(res.body, res.head));
            },
            &included);

        std::vector<const ParamSet*> sets;
        std::vector<std::size_t> sizes;
        for (std::size_t i = 0; i < updates.size(); ++i) {
            sets.push_back(&updates[i].second);
            sizes.push_back(clients[included[i]].train.size());
        }
        record.weights = compute_weights(cfg.policy, sizes);
        out.global = aggregate(sets, record.weights);
        if (audit != nullptr) audit->record(out.global);

        if (split.enabled) {
            record.val_rmse = validation_rmse(
                model, split.val_by_client,
                [&](int) -> const ParamSet& { return out.global; });
        }
        out.rounds.push_back(std::move(record));
    }
    return out;
}

PflResult run_pfl(const FederationConfig& cfg, const std::vector<ClientState>& clients_in,
                  const GrowthModel& model, ServerAudit* audit) {
    cfg.validate();
    const auto clients_sorted = sorted_clients(clients_in, "run_pfl");
    const auto split = carve_validation(clients_sorted, cfg);
    const auto& clients = split.train;

    PflResult out;
    // Server state is BODY only; heads are created client-side from the same
    // per-tensor streams so that K=1 PFL matches centralized training.
    out.body = model.init_body(cfg.seed);
    if (audit != nullptr) audit->record(out.body);
    const ParamSet initial_head = model.init_params(cfg.seed).filter(Partition::Head);
    for (const auto& c : clients) out.heads.emplace(c.client_id, initial_head);

    for (int r = 1; r <= cfg.rounds; ++r) {
        std::vector<std::pair<int, ParamSet>> bodies;
        std::vector<std::size_t> included;
        RoundRecord record = run_round(
            cfg, clients, model, r,
            [&](int) { return out.body; },
            // The client restores its previously learned personalized head.
            [&](int client_id) { return out.heads.at(client_id); },
            [&](const ClientState& client, LocalTrainResult&& res) {
                out.heads.at(client.client_id) = std::move(res.head);
                bodies.emplace_back(client.client_id, std::move(res.body));
            },
            &included);

        std::vector<const ParamSet*> sets;
        std::vector<std::size_t> sizes;
        for (std::size_t i = 0; i < bodies.size(); ++i) {
            if (audit != nullptr) audit->record(bodies[i].second);
            sets.push_back(&bodies[i].second);
            sizes.push_back(clients[included[i]].train.size());
        }
        record.weights = compute_weights(cfg.policy, sizes);
        out.body = aggregate(sets, record.weights);
        if (audit != nullptr) audit->record(out.body);

        if (split.enabled) {
            std::map<int, ParamSet> full;
            for (const auto& [id, head] : out.heads) full.emplace(id, merge_params(out.body, head));
            record.val_rmse = validation_rmse(
                model, split.val_by_client,
                [&](int client_id) -> const ParamSet& { return full.at(client_id); });
        }
        out.rounds.push_back(std::move(record));
    }
    return out;
}

CentralResult run_centralized(const FederationConfig& cfg,
                              const std::vector<ClientState>& clients_in,
                              const GrowthModel& model) {
    cfg.validate();
    const auto clients = sorted_clients(clients_in, "run_centralized");

    ClientState pooled;
    pooled.client_id = 0;
    for (const auto& c : clients) {
        pooled.n_animals += c.n_animals;
        pooled.train.insert(pooled.train.end(), c.train.begin(), c.train.end());
    }

    CentralResult out;
    out.params = model.init_params(cfg.seed);
    for (int r = 1; r <= cfg.rounds; ++r) {
        LocalTrainResult res =
            local_train(pooled, out.params.filter(Partition::Body),
                        out.params.filter(Partition::Head), model, cfg.local_epochs,
                        cfg.learning_rate, cfg.seed, r);
        out.params = merge_params(res.body, res.head);
        out.epoch_losses.insert(out.epoch_losses.end(), res.epoch_losses.begin(),
                                res.epoch_losses.end());
    }
    return out;
}

LocalOnlyResult run_local_only(const FederationConfig& cfg,
                               const std::vector<ClientState>& clients_in,
                               const GrowthModel& model) {
    cfg.validate();
    const auto clients = sorted_clients(clients_in, "run_local_only");

    LocalOnlyResult out;
    std::vector<ClientOutcome> outcomes(clients.size());
    std::vector<std::vector<double>> traces(clients.size());
    parallel_for(cfg.threads, clients.size(), [&](std::size_t i) {
        const ClientState& client = clients[i];
        try {
            ParamSet params = model.init_params(
                derive_seed(cfg.seed, "local_init", static_cast<std::uint64_t>(client.client_id)));
            std::vector<double> trace;
            for (int r = 1; r <= cfg.rounds; ++r) {
                LocalTrainResult res =
                    local_train(client, params.filter(Partition::Body),
                                params.filter(Partition::Head), model, cfg.local_epochs,
                                cfg.learning_rate, cfg.seed, r);
                params = merge_params(res.body, res.head);
                trace.insert(trace.end(), res.epoch_losses.begin(), res.epoch_losses.end());
            }
            outcomes[i].result = LocalTrainResult{params.filter(Partition::Body),
                                                  params.filter(Partition::Head), {}};
            traces[i] = std::move(trace);
        } catch (const TrainingDivergence& d) {
            outcomes[i].divergence = d;
        } catch (...) {
            outcomes[i].error = std::current_exception();
        }
    });
    for (const auto& o : outcomes) {
        if (o.error) std::rethrow_exception(o.error);
    }
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const int id = clients[i].client_id;
        if (outcomes[i].divergence) {
            out.diverged.push_back(id);
            continue;
        }
        out.models.emplace(id, merge_params(outcomes[i].result->body, outcomes[i].result->head));
        out.traces.emplace(id, std::move(traces[i]));
    }
    return out;
}

PflFinetuneResult run_pfl_finetune(const FederationConfig& cfg,
                                   const std::vector<ClientState>& clients_in,
                                   const GrowthModel& model) {
    cfg.validate();
    const auto clients = sorted_clients(clients_in, "run_pfl_finetune");

    FlResult base = run_fl(cfg, clients, model);
    PflFinetuneResult out;
    out.global = std::move(base.global);
    out.rounds = std::move(base.rounds);

    std::vector<ClientOutcome> outcomes(clients.size());
    parallel_for(cfg.threads, clients.size(), [&](std::size_t i) {
        try {
            outcomes[i].result = local_train(
                clients[i], out.global.filter(Partition::Body),
                out.global.filter(Partition::Head), model, cfg.finetune_epochs,
                cfg.learning_rate, cfg.seed, cfg.rounds + 1);
        } catch (const TrainingDivergence& d) {
            outcomes[i].divergence = d;
        } catch (...) {
            outcomes[i].error = std::current_exception();
        }
    });
    for (const auto& o : outcomes) {
        if (o.error) std::rethrow_exception(o.error);
    }
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const int id = clients[i].client_id;
        if (outcomes[i].divergence) {
            out.diverged.push_back(id);
            out.models.emplace(id, out.global);
            continue;
        }
        out.models.emplace(id, merge_params(outcomes[i].result->body, outcomes[i].result->head));
    }
    return out;
}

}  // namespace fedstock
