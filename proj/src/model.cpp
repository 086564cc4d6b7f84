#include "fedstock/model.hpp"

#include <cmath>

#include "fedstock/checkpoint.hpp"
#include "fedstock/errors.hpp"

namespace fedstock {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* field) {
        if (v < 1) throw ConfigError(std::string("model.") + field, "must be >= 1");
    };
    positive(d_n, "d_n");
    positive(d_m, "d_m");
    positive(d_e, "d_e");
    positive(d_h, "d_h");
    positive(horizon, "horizon");
    positive(head_hidden, "head_hidden");
    if (category_cardinalities.empty()) {
        throw ConfigError("model.category_cardinalities", "must list at least one category");
    }
    for (std::size_t i = 0; i < category_cardinalities.size(); ++i) {
        if (category_cardinalities[i] < 1) {
            throw ConfigError("model.category_cardinalities[" + std::to_string(i) + "]",
                              "must be >= 1");
        }
    }
}

std::vector<std::string> ModelConfig::category_names() const {
    static const std::vector<std::string> kDefault = {"sex", "breed", "state", "nrm_region"};
    const std::size_t n = category_cardinalities.size();
    if (n == kDefault.size()) return kDefault;
    std::vector<std::string> names;
    names.reserve(n);
    for (std::size_t i = 0; i < n; ++i) names.push_back("cat" + std::to_string(i));
    return names;
}

GrowthModel::GrowthModel(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

namespace {

Tensor init_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

Tensor init_table(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.1, 0.1);
    return t;
}

}  // namespace

ParamSet GrowthModel::init_named(std::uint64_t seed, bool body_only) const {
    ParamSet params;
    auto stream = [&](const std::string& name) { return Rng(derive_seed(seed, "init." + name)); };
    auto add_matrix = [&](const std::string& name, std::size_t rows, std::size_t cols,
                          Partition part) {
        Rng rng = stream(name);
        params.add(name, init_matrix(rows, cols, rng), part);
    };
    auto add_bias = [&](const std::string& name, std::size_t n, Partition part) {
        params.add(name, Tensor::zeros({n}), part);
    };

    const auto de = static_cast<std::size_t>(cfg_.d_e);
    const auto dh = static_cast<std::size_t>(cfg_.d_h);
    const auto din = static_cast<std::size_t>(cfg_.gru_input_dim());

    const auto names = cfg_.category_names();
    for (std::size_t l = 0; l < names.size(); ++l) {
        const std::string name = "embed." + names[l];
        Rng rng = stream(name);
        params.add(name,
                   init_table(static_cast<std::size_t>(cfg_.category_cardinalities[l]), de, rng),
                   Partition::Body);
    }

    add_matrix("numeric.weight", de, static_cast<std::size_t>(cfg_.d_n), Partition::Body);
    add_bias("numeric.bias", de, Partition::Body);

    for (const char* gate : {"update", "reset", "cand"}) {
        add_matrix("gru.w_" + std::string(gate), dh, din, Partition::Body);
        add_matrix("gru.u_" + std::string(gate), dh, dh, Partition::Body);
        add_bias("gru.b_" + std::string(gate), dh, Partition::Body);
    }

    if (!body_only) {
        const auto hidden = static_cast<std::size_t>(cfg_.head_hidden);
        const auto fused = static_cast<std::size_t>(cfg_.fused_dim());
        const auto out = static_cast<std::size_t>(2 * cfg_.horizon);
        add_matrix("head.w1", hidden, fused, Partition::Head);
        add_bias("head.b1", hidden, Partition::Head);
        add_matrix("head.w2", out, hidden, Partition::Head);
        add_bias("head.b2", out, Partition::Head);
    }
    return params;
}

ParamSet GrowthModel::init_params(std::uint64_t seed) const { return init_named(seed, false); }

ParamSet GrowthModel::init_body(std::uint64_t seed) const { return init_named(seed, true); }

GruCellParams GrowthModel::gru_view(const ParamSet& params) const {
    GruCellParams p;
    p.w_update = &params.get("gru.w_update");
    p.u_update = &params.get("gru.u_update");
    p.b_update = &params.get("gru.b_update");
    p.w_reset = &params.get("gru.w_reset");
    p.u_reset = &params.get("gru.u_reset");
    p.b_reset = &params.get("gru.b_reset");
    p.w_cand = &params.get("gru.w_cand");
    p.u_cand = &params.get("gru.u_cand");
    p.b_cand = &params.get("gru.b_cand");
    return p;
}

void GrowthModel::check_instance(const Instance& inst) const {
    if (inst.x.rank() != 2 || inst.x.dim(1) != static_cast<std::size_t>(cfg_.d_n)) {
        throw DimensionError("instance x has shape " + inst.x.shape_string() + ", expected [T x " +
                             std::to_string(cfg_.d_n) + "]");
    }
    if (inst.m.rank() != 2 || inst.m.dim(1) != static_cast<std::size_t>(cfg_.d_m) ||
        inst.m.dim(0) != inst.x.dim(0)) {
        throw DimensionError("instance m has shape " + inst.m.shape_string() +
                             ", expected [T x " + std::to_string(cfg_.d_m) + "] with T = " +
                             std::to_string(inst.x.dim(0)));
    }
    if (inst.categories.size() != static_cast<std::size_t>(cfg_.category_count())) {
        throw DimensionError("instance has " + std::to_string(inst.categories.size()) +
                             " categories, model expects " +
                             std::to_string(cfg_.category_count()));
    }
}

Graph::NodeId GrowthModel::embed_static(Graph& g, const std::vector<int>& categories,
                                        const ParamSet& params) const {
    const auto names = cfg_.category_names();
    if (categories.size() != names.size()) {
        throw DimensionError("embed_static: got " + std::to_string(categories.size()) +
                             " category indices, expected " + std::to_string(names.size()));
    }
    std::vector<Graph::NodeId> parts;
    parts.reserve(names.size());
    for (std::size_t l = 0; l < names.size(); ++l) {
        parts.push_back(g.embed_lookup(params.get("embed." + names[l]), categories[l]));
    }
    return g.concat(parts);
}

Graph::NodeId GrowthModel::encode_sequence(Graph& g, const Tensor& x, const Tensor& m,
                                           const ParamSet& params) const {
    if (x.rank() != 2 || m.rank() != 2 || x.dim(0) != m.dim(0)) {
        throw DimensionError("encode_sequence: x " + x.shape_string() + " and m " +
                             m.shape_string() + " must both be rank 2 with equal T");
    }
    const std::size_t steps = x.dim(0);
    if (steps == 0) throw ArgumentError("encode_sequence: empty sequence");

    const ParamTensor& w_n = params.get("numeric.weight");
    const ParamTensor& b_n = params.get("numeric.bias");
    const GruCellParams gru = gru_view(params);
    const auto d_n = x.dim(1);
    const auto d_m = m.dim(1);

    const std::vector<double> h0(static_cast<std::size_t>(cfg_.d_h), 0.0);
    Graph::NodeId h = g.input(h0.data(), h0.size());
    for (std::size_t t = 0; t < steps; ++t) {
        const Graph::NodeId embedded = g.linear(g.input(x.data() + t * d_n, d_n), w_n, b_n);
        const Graph::NodeId z = g.concat({embedded, g.input(m.data() + t * d_m, d_m)});
        h = g.gru_cell(z, h, gru);
    }
    return h;
}

GrowthModel::PredictionNodes GrowthModel::build_prediction(Graph& g, const Instance& inst,
                                                           const ParamSet& params) const {
    check_instance(inst);
    const Graph::NodeId hidden = encode_sequence(g, inst.x, inst.m, params);
    const Graph::NodeId statics = embed_static(g, inst.categories, params);
    const Graph::NodeId fused = g.concat({hidden, statics});
    const Graph::NodeId h1 = g.relu(g.linear(fused, params.get("head.w1"), params.get("head.b1")));
    const Graph::NodeId out = g.linear(h1, params.get("head.w2"), params.get("head.b2"));
    const auto horizon = static_cast<std::size_t>(cfg_.horizon);
    PredictionNodes nodes;
    nodes.mu = g.slice(out, 0, horizon);
    nodes.log_var = g.clamp(g.slice(out, horizon, horizon), kLogVarMin, kLogVarMax);
    return nodes;
}

Prediction GrowthModel::predict(const Instance& inst, const ParamSet& params) const {
    Graph g;
    return predict(inst, params, g);
}

Prediction GrowthModel::predict(const Instance& inst, const ParamSet& params,
                                Graph& scratch) const {
    scratch.reset();
    const PredictionNodes nodes = build_prediction(scratch, inst, params);
    return Prediction{scratch.value(nodes.mu), scratch.value(nodes.log_var)};
}

double GrowthModel::loss(const Instance& inst, const ParamSet& params) const {
    Graph g;
    return loss(inst, params, g);
}

double GrowthModel::loss(const Instance& inst, const ParamSet& params, Graph& scratch) const {
    scratch.reset();
    const PredictionNodes nodes = build_prediction(scratch, inst, params);
    return scratch.scalar(scratch.gaussian_nll(nodes.mu, nodes.log_var, inst.y));
}

double GrowthModel::loss_backward(const Instance& inst, const ParamSet& params) const {
    Graph g;
    return loss_backward(inst, params, g);
}

double GrowthModel::loss_backward(const Instance& inst, const ParamSet& params,
                                  Graph& scratch) const {
    scratch.reset();
    const PredictionNodes nodes = build_prediction(scratch, inst, params);
    const Graph::NodeId loss = scratch.gaussian_nll(nodes.mu, nodes.log_var, inst.y);
    scratch.backward(loss);
    return scratch.scalar(loss);
}

double nll_loss(const Prediction& pred, const Tensor& y) {
    if (!pred.mu.same_shape(y) || !pred.log_var.same_shape(y) || y.rank() != 1 || y.size() == 0) {
        throw DimensionError("nll_loss: mu " + pred.mu.shape_string() + ", log_var " +
                             pred.log_var.shape_string() + ", y " + y.shape_string());
    }
    const std::size_t horizon = y.size();
    double loss = 0.0;
    for (std::size_t h = 0; h < horizon; ++h) {
        double lv = pred.log_var[h];
        lv = lv < kLogVarMin ? kLogVarMin : (lv > kLogVarMax ? kLogVarMax : lv);
        const double resid = y[h] - pred.mu[h];
        loss += lv + resid * resid * std::exp(-lv);
    }
    loss /= 2.0 * static_cast<double>(horizon);
    if (!std::isfinite(loss)) throw NumericError("nll_loss: non-finite result");
    return loss;
}

Tensor sample_forecast(const Prediction& pred, Rng& rng) {
    Tensor draw(pred.mu.shape());
    for (std::size_t h = 0; h < draw.size(); ++h) {
        const double sigma = std::exp(0.5 * pred.log_var[h]);
        draw[h] = pred.mu[h] + sigma * rng.normal();
    }
    return draw;
}

Tensor point_forecast(const Prediction& pred) { return pred.mu; }

}  // namespace fedstock
