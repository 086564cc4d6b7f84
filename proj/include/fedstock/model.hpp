#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedstock/graph.hpp"
#include "fedstock/params.hpp"
#include "fedstock/rng.hpp"
#include "fedstock/tensor.hpp"

namespace fedstock {

// Architecture hyperparameters. d_n counts the per-step numeric features
// (weight, age, distance, credibility), d_m the mask width.
struct ModelConfig {
    int d_n = 4;
    int d_m = 1;
    int d_e = 16;
    int d_h = 64;
    int horizon = 3;
    int head_hidden = 64;
    std::vector<int> category_cardinalities = {3, 6, 4, 10};

    int category_count() const { return static_cast<int>(category_cardinalities.size()); }
    int gru_input_dim() const { return d_e + d_m; }
    int fused_dim() const { return d_h + category_count() * d_e; }

    void validate() const;
    std::vector<std::string> category_names() const;
};

// One training/evaluation sample in normalized units.
struct Instance {
    Tensor x;                     // [T x d_n]
    Tensor m;                     // [T x d_m]
    std::vector<int> categories;  // L static category indices
    Tensor y;                     // [H]
    int farm_id = 0;
    std::int64_t animal_id = 0;

    std::size_t steps() const { return x.rank() == 2 ? x.dim(0) : 0; }
};

// log-variance outputs are clamped to this range; the NLL is unbounded below
// as the variance collapses on noise-free targets.
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct Prediction {
    Tensor mu;       // [H]
    Tensor log_var;  // [H], clamped
};

// GRU + MLP growth forecaster: numeric embedding with mask channel feeds a
// GRU over the monthly sequence; static category embeddings are fused with
// the final hidden state; a two-layer head emits mean and log-variance per
// horizon step. Parameters are owned by the caller (ParamSet), so the same
// model object can drive many clients.
class GrowthModel {
public:
    explicit GrowthModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }

    // Fresh parameters. Each tensor draws from its own name-derived stream,
    // so constructing only a subset (e.g. body without head) yields the same
    // values for the tensors present.
    ParamSet init_params(std::uint64_t seed) const;
    ParamSet init_body(std::uint64_t seed) const;

    Graph::NodeId embed_static(Graph& g, const std::vector<int>& categories,
                               const ParamSet& params) const;
    Graph::NodeId encode_sequence(Graph& g, const Tensor& x, const Tensor& m,
                                  const ParamSet& params) const;

    struct PredictionNodes {
        Graph::NodeId mu;
        Graph::NodeId log_var;
    };
    PredictionNodes build_prediction(Graph& g, const Instance& inst, const ParamSet& params) const;

    Prediction predict(const Instance& inst, const ParamSet& params) const;
    Prediction predict(const Instance& inst, const ParamSet& params, Graph& scratch) const;

    // Gaussian NLL of the instance under `params`. The Graph overloads reuse
    // the caller's tape (reset internally) to avoid per-call allocation.
    double loss(const Instance& inst, const ParamSet& params) const;
    double loss(const Instance& inst, const ParamSet& params, Graph& scratch) const;
    // Same, but also accumulates gradients into the ParamSet.
    double loss_backward(const Instance& inst, const ParamSet& params) const;
    double loss_backward(const Instance& inst, const ParamSet& params, Graph& scratch) const;

private:
    ParamSet init_named(std::uint64_t seed, bool body_only) const;
    GruCellParams gru_view(const ParamSet& params) const;
    void check_instance(const Instance& inst) const;

    ModelConfig cfg_;
};

// L = (1 / 2H) * sum_h [ log sigma_h^2 + (y_h - mu_h)^2 / sigma_h^2 ], with
// log-variance clamped to [kLogVarMin, kLogVarMax].
double nll_loss(const Prediction& pred, const Tensor& y);

// Draws each horizon step independently from N(mu_h, sigma_h^2).
Tensor sample_forecast(const Prediction& pred, Rng& rng);

// The mean is the point estimate used for metric computation.
Tensor point_forecast(const Prediction& pred);

}  // namespace fedstock
