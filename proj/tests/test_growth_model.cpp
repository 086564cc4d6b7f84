#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fedstock/model.hpp"
#include "test_support.hpp"

using namespace fedstock;
using testsupport::check_gradients;
using testsupport::random_tensor;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_e = 2;
    cfg.d_h = 3;
    cfg.horizon = 2;
    cfg.head_hidden = 3;
    cfg.category_cardinalities = {2, 3};
    return cfg;
}

Instance random_instance(const ModelConfig& cfg, std::size_t steps, Rng& rng) {
    Instance inst;
    inst.x = random_tensor({steps, static_cast<std::size_t>(cfg.d_n)}, rng, 0.0, 1.0);
    inst.m = Tensor({steps, static_cast<std::size_t>(cfg.d_m)});
    for (std::size_t t = 0; t < steps; ++t) {
        inst.m.at(t, 0) = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    for (int card : cfg.category_cardinalities) {
        inst.categories.push_back(rng.uniform_int(0, card - 1));
    }
    inst.y = random_tensor({static_cast<std::size_t>(cfg.horizon)}, rng, 0.0, 1.0);
    return inst;
}

ParamSet randomized_params(const GrowthModel& model, std::uint64_t seed) {
    // init_params gives structure; re-draw every tensor (biases included) so
    // gradient checks see no dead zeros.
    ParamSet params = model.init_params(seed);
    Rng rng(derive_seed(seed, "randomize"));
    for (auto& p : params.params()) {
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = rng.uniform(-0.7, 0.7);
    }
    return params;
}

testsupport::GruOracleParams oracle_view(const ParamSet& params) {
    testsupport::GruOracleParams op;
    op.w_update = testsupport::to_rows(params.get("gru.w_update").value);
    op.u_update = testsupport::to_rows(params.get("gru.u_update").value);
    op.b_update = params.get("gru.b_update").value.values();
    op.w_reset = testsupport::to_rows(params.get("gru.w_reset").value);
    op.u_reset = testsupport::to_rows(params.get("gru.u_reset").value);
    op.b_reset = params.get("gru.b_reset").value.values();
    op.w_cand = testsupport::to_rows(params.get("gru.w_cand").value);
    op.u_cand = testsupport::to_rows(params.get("gru.u_cand").value);
    op.b_cand = params.get("gru.b_cand").value.values();
    return op;
}

std::vector<double> oracle_encode(const ParamSet& params, const Instance& inst, int d_h) {
    const auto op = oracle_view(params);
    const auto wn = testsupport::to_rows(params.get("numeric.weight").value);
    const auto& bn = params.get("numeric.bias").value;
    std::vector<double> state(static_cast<std::size_t>(d_h), 0.0);
    for (std::size_t t = 0; t < inst.x.dim(0); ++t) {
        std::vector<double> x_row(inst.x.data() + t * inst.x.dim(1),
                                  inst.x.data() + (t + 1) * inst.x.dim(1));
        std::vector<double> z = testsupport::matvec_oracle(wn, x_row);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += bn[i];
        z.push_back(inst.m.at(t, 0));
        state = testsupport::gru_step_oracle(op, z, state);
    }
    return state;
}

}  // namespace

TEST_CASE("embed_static concatenates lookups in feature order") {
    ModelConfig cfg;
    cfg.d_e = 2;
    cfg.category_cardinalities = {2, 2};
    cfg.d_h = 2;
    cfg.horizon = 1;
    cfg.head_hidden = 2;
    GrowthModel model(cfg);
    ParamSet params = model.init_params(1);
    params.get("embed.cat0").value = Tensor({2, 2}, {9, 9, 1, 2});
    params.get("embed.cat1").value = Tensor({2, 2}, {3, 4, 8, 8});

    Graph g;
    const Tensor out = g.value(model.embed_static(g, {1, 0}, params));
    REQUIRE(out.size() == 4);
    CHECK(out[0] == 1.0);
    CHECK(out[1] == 2.0);
    CHECK(out[2] == 3.0);
    CHECK(out[3] == 4.0);

    Graph g2;
    const Tensor again = g2.value(model.embed_static(g2, {1, 0}, params));
    CHECK(std::memcmp(out.data(), again.data(), out.size() * sizeof(double)) == 0);
}

TEST_CASE("embed_static with defaults yields a 64-wide vector") {
    GrowthModel model(ModelConfig{});
    ParamSet params = model.init_params(3);
    Graph g;
    CHECK(g.value(model.embed_static(g, {0, 1, 2, 3}, params)).size() == 64);
}

TEST_CASE("encode_sequence base case reduces to one gru_cell call") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(21);
    ParamSet params = randomized_params(model, 21);

    Instance inst = random_instance(cfg, 1, rng);
    Graph g;
    const Tensor h = g.value(model.encode_sequence(g, inst.x, inst.m, params));
    const auto expected = oracle_encode(params, inst, cfg.d_h);
    REQUIRE(h.size() == expected.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        CHECK(h[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
}

TEST_CASE("encode_sequence matches a step-by-step oracle for T=5") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(77);
    ParamSet params = randomized_params(model, 77);
    Instance inst = random_instance(cfg, 5, rng);

    Graph g;
    const Tensor h = g.value(model.encode_sequence(g, inst.x, inst.m, params));
    const auto expected = oracle_encode(params, inst, cfg.d_h);
    for (std::size_t i = 0; i < h.size(); ++i) {
        CHECK(h[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
}

TEST_CASE("encode_sequence rejects empty sequences and zero params give zero") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    ParamSet params = model.init_params(4);
    for (auto& p : params.params()) p.value.fill(0.0);

    Graph g;
    Tensor empty_x({0, static_cast<std::size_t>(cfg.d_n)});
    Tensor empty_m({0, 1});
    CHECK_THROWS_AS(model.encode_sequence(g, empty_x, empty_m, params), ArgumentError);

    Rng rng(8);
    Instance inst = random_instance(cfg, 4, rng);
    Graph g2;
    const Tensor h = g2.value(model.encode_sequence(g2, inst.x, inst.m, params));
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i] == 0.0);
}

TEST_CASE("predict output is 2H split into mu and clamped log_var") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(31);
    ParamSet params = randomized_params(model, 31);
    Instance inst = random_instance(cfg, 3, rng);

    const Prediction pred = model.predict(inst, params);
    CHECK(pred.mu.size() == static_cast<std::size_t>(cfg.horizon));
    CHECK(pred.log_var.size() == static_cast<std::size_t>(cfg.horizon));

    ParamSet zeros = model.init_params(1);
    for (auto& p : zeros.params()) p.value.fill(0.0);
    const Prediction zp = model.predict(inst, zeros);
    for (std::size_t h = 0; h < zp.mu.size(); ++h) {
        CHECK(zp.mu[h] == 0.0);
        CHECK(zp.log_var[h] == 0.0);
    }
}

TEST_CASE("predict equals the manual composition of its stages") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(55);
    ParamSet params = randomized_params(model, 55);
    Instance inst = random_instance(cfg, 4, rng);

    const Prediction pred = model.predict(inst, params);

    Graph g;
    const auto hidden = model.encode_sequence(g, inst.x, inst.m, params);
    const auto statics = model.embed_static(g, inst.categories, params);
    const auto fused = g.concat({hidden, statics});
    const auto h1 = g.relu(g.linear(fused, params.get("head.w1"), params.get("head.b1")));
    const Tensor o = g.value(g.linear(h1, params.get("head.w2"), params.get("head.b2")));
    for (int h = 0; h < cfg.horizon; ++h) {
        CHECK(pred.mu[h] == o[h]);
        const double lv = std::clamp(o[cfg.horizon + h], kLogVarMin, kLogVarMax);
        CHECK(pred.log_var[h] == lv);
    }
}

TEST_CASE("log_var clamp holds for arbitrary parameters") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(91);
    ParamSet params = randomized_params(model, 91);
    params.get("head.b2").value.fill(500.0);
    Instance inst = random_instance(cfg, 3, rng);
    const Prediction pred = model.predict(inst, params);
    for (std::size_t h = 0; h < pred.log_var.size(); ++h) {
        CHECK(pred.log_var[h] == kLogVarMax);
    }
    params.get("head.b2").value.fill(-500.0);
    const Prediction low = model.predict(inst, params);
    for (std::size_t h = 0; h < low.log_var.size(); ++h) {
        CHECK(low.log_var[h] == kLogVarMin);
    }
}

TEST_CASE("nll_loss hand-computed values") {
    Prediction perfect;
    perfect.mu = Tensor::vector({0.4, 0.6});
    perfect.log_var = Tensor::zeros({2});
    CHECK(nll_loss(perfect, Tensor::vector({0.4, 0.6})) == 0.0);

    Prediction one;
    one.mu = Tensor::vector({0.0});
    one.log_var = Tensor::zeros({1});
    CHECK(nll_loss(one, Tensor::vector({1.0})) == doctest::Approx(0.5).epsilon(1e-15));

    Prediction two;
    two.mu = Tensor::vector({0.0, 0.0});
    two.log_var = Tensor::vector({0.0, std::log(4.0)});
    const double expected = (2.0 + std::log(4.0)) / 4.0;
    CHECK(std::abs(nll_loss(two, Tensor::vector({1.0, 2.0})) - expected) < 1e-12);
}

TEST_CASE("graph loss agrees with the standalone nll_loss") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(66);
    ParamSet params = randomized_params(model, 66);
    Instance inst = random_instance(cfg, 6, rng);
    const double graph_loss = model.loss(inst, params);
    const double standalone = nll_loss(model.predict(inst, params), inst.y);
    CHECK(graph_loss == doctest::Approx(standalone).epsilon(1e-14));
}

TEST_CASE("nll gradient wrt mu vanishes at mu = y") {
    ParamSet set;
    set.add("mu", Tensor::vector({0.3, -0.2, 0.9}), Partition::Body);
    Graph g;
    const auto lv = g.input(Tensor::vector({0.5, -1.0, 0.0}));
    g.backward(g.gaussian_nll(g.param(set.get("mu")), lv, Tensor::vector({0.3, -0.2, 0.9})));
    for (std::size_t i = 0; i < 3; ++i) CHECK(set.get("mu").grad[i] == 0.0);
}

TEST_CASE("end-to-end gradients match finite differences incl. T=1 and T=23") {
    int checked = 0;
    for (int trial = 0; trial < 22; ++trial) {
        Rng rng(derive_seed(17, "e2e", trial));
        ModelConfig cfg;
        cfg.d_e = 1 + trial % 3;
        cfg.d_h = 1 + (trial / 3) % 4;
        cfg.horizon = 1 + trial % 3;
        cfg.head_hidden = 1 + (trial / 2) % 4;
        cfg.category_cardinalities = {2, 1 + trial % 4};
        GrowthModel model(cfg);
        ParamSet params = randomized_params(model, derive_seed(17, "e2e_params", trial));

        const std::size_t steps =
            trial == 0 ? 1 : (trial == 1 ? 23 : 1 + static_cast<std::size_t>(rng.uniform_int(0, 11)));
        Instance inst = random_instance(cfg, steps, rng);

        const double base = model.loss_backward(inst, params);
        CHECK(std::isfinite(base));
        auto forward = [&] { return model.loss(inst, params); };
        const auto check = check_gradients(params, forward);
        CAPTURE(trial);
        CAPTURE(check.worst);
        CHECK(check.max_rel_err < 1e-4);
        ++checked;
    }
    CHECK(checked >= 20);
}

TEST_CASE("predict is permutation-sensitive in time") {
    ModelConfig cfg = small_config();
    GrowthModel model(cfg);
    Rng rng(101);
    ParamSet params = randomized_params(model, 101);
    Instance inst = random_instance(cfg, 6, rng);
    for (std::size_t t = 0; t < 6; ++t) inst.x.at(t, 0) = 0.1 + 0.15 * static_cast<double>(t);

    Instance reversed = inst;
    for (std::size_t t = 0; t < 6; ++t) {
        for (std::size_t j = 0; j < inst.x.dim(1); ++j) {
            reversed.x.at(t, j) = inst.x.at(5 - t, j);
        }
        reversed.m.at(t, 0) = inst.m.at(5 - t, 0);
    }
    const Prediction a = model.predict(inst, params);
    const Prediction b = model.predict(reversed, params);
    double diff = 0.0;
    for (std::size_t h = 0; h < a.mu.size(); ++h) diff += std::abs(a.mu[h] - b.mu[h]);
    CHECK(diff > 1e-12);
}

TEST_CASE("sample_forecast draws from the predicted distribution") {
    Prediction pred;
    pred.mu = Tensor::vector({0.0});
    pred.log_var = Tensor::vector({0.0});

    Rng a(42);
    Rng b(42);
    CHECK(sample_forecast(pred, a)[0] == sample_forecast(pred, b)[0]);

    Prediction tight;
    tight.mu = Tensor::vector({2.0, -1.0});
    tight.log_var = Tensor::vector({kLogVarMin, kLogVarMin});
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const Tensor s = sample_forecast(tight, rng);
        CHECK(std::abs(s[0] - 2.0) < 5.0 * std::exp(-5.0));
        CHECK(std::abs(s[1] + 1.0) < 5.0 * std::exp(-5.0));
    }

    Rng mc(123);
    double sum = 0.0;
    double sq = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const double v = sample_forecast(pred, mc)[0];
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("point_forecast is the mean, independent of log_var") {
    Prediction pred;
    pred.mu = Tensor::vector({1.0, 2.0, 3.0});
    pred.log_var = Tensor::vector({-3.0, 0.0, 5.0});
    const Tensor point = point_forecast(pred);
    CHECK(point[0] == 1.0);
    CHECK(point[1] == 2.0);
    CHECK(point[2] == 3.0);

    pred.log_var = Tensor::vector({2.0, 2.0, 2.0});
    const Tensor again = point_forecast(pred);
    for (int i = 0; i < 3; ++i) CHECK(point[i] == again[i]);

    Prediction unit;
    unit.mu = Tensor::vector({0.7});
    unit.log_var = Tensor::vector({0.0});
    Rng rng(2024);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += sample_forecast(unit, rng)[0];
    CHECK(std::abs(sum / n - point_forecast(unit)[0]) < 0.05);
}

TEST_CASE("init_params partitions exactly the head layers as HEAD") {
    GrowthModel model(ModelConfig{});
    const ParamSet params = model.init_params(9);
    std::vector<std::string> head_names;
    for (const auto& p : params.params()) {
        if (p.partition == Partition::Head) head_names.push_back(p.name);
    }
    REQUIRE(head_names.size() == 4);
    CHECK(head_names[0] == "head.w1");
    CHECK(head_names[1] == "head.b1");
    CHECK(head_names[2] == "head.w2");
    CHECK(head_names[3] == "head.b2");
}

TEST_CASE("init_body matches the body part of a full init") {
    GrowthModel model(ModelConfig{});
    const ParamSet full = model.init_params(1234);
    const ParamSet body = model.init_body(1234);
    const ParamSet filtered = full.filter(Partition::Body);
    REQUIRE(body.count() == filtered.count());
    for (std::size_t k = 0; k < body.count(); ++k) {
        const auto& a = body.params()[k];
        const auto& b = filtered.params()[k];
        CHECK(a.name == b.name);
        REQUIRE(a.value.same_shape(b.value));
        CHECK(std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(double)) == 0);
    }
}
