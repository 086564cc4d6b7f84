#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "fedstock/checkpoint.hpp"
#include "fedstock/graph.hpp"
#include "fedstock/params.hpp"
#include "fedstock/rng.hpp"
#include "test_support.hpp"

using namespace fedstock;
using testsupport::check_gradients;
using testsupport::random_tensor;

namespace {

ParamTensor make_param(const std::string& name, Tensor value) {
    return ParamTensor(name, std::move(value), partition_for_name(name));
}

// loss = sum(v), realized as a ones-row matvec so it lives on the tape.
Graph::NodeId sum_of(Graph& g, Graph::NodeId v, ParamTensor& reducer) {
    return g.matvec(v, reducer);
}

ParamTensor ones_row(std::size_t n) {
    Tensor t({1, n});
    t.fill(1.0);
    return make_param("test.reducer", std::move(t));
}

GruCellParams view_of(ParamSet& set) {
    GruCellParams p;
    p.w_update = &set.get("gru.w_update");
    p.u_update = &set.get("gru.u_update");
    p.b_update = &set.get("gru.b_update");
    p.w_reset = &set.get("gru.w_reset");
    p.u_reset = &set.get("gru.u_reset");
    p.b_reset = &set.get("gru.b_reset");
    p.w_cand = &set.get("gru.w_cand");
    p.u_cand = &set.get("gru.u_cand");
    p.b_cand = &set.get("gru.b_cand");
    return p;
}

ParamSet random_gru(std::size_t d_in, std::size_t d_h, Rng& rng) {
    ParamSet set;
    for (const char* gate : {"update", "reset", "cand"}) {
        set.add("gru.w_" + std::string(gate), random_tensor({d_h, d_in}, rng), Partition::Body);
        set.add("gru.u_" + std::string(gate), random_tensor({d_h, d_h}, rng), Partition::Body);
        set.add("gru.b_" + std::string(gate), random_tensor({d_h}, rng), Partition::Body);
    }
    return set;
}

}  // namespace

TEST_CASE("linear identity and hand-computed cases") {
    ParamTensor w = make_param("w", Tensor({2, 2}, {1, 0, 0, 1}));
    ParamTensor b = make_param("b", Tensor({2}, {0, 0}));
    Graph g;
    const auto y = g.linear(g.input({1.0, 2.0}), w, b);
    CHECK(g.value(y)[0] == 1.0);
    CHECK(g.value(y)[1] == 2.0);

    ParamTensor w2 = make_param("w2", Tensor({1, 2}, {2, 3}));
    ParamTensor b2 = make_param("b2", Tensor({1}, {-1}));
    Graph g2;
    const auto y2 = g2.linear(g2.input({1.0, 1.0}), w2, b2);
    CHECK(g2.value(y2)[0] == doctest::Approx(4.0));
}

TEST_CASE("linear shape mismatch names both shapes") {
    ParamTensor w = make_param("w", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    ParamTensor b = make_param("b", Tensor({2}, {0, 0}));
    Graph g;
    try {
        g.linear(g.input({1.0, 2.0}), w, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2]") != std::string::npos);
    }
}

TEST_CASE("linear gradients match finite differences over 100 seeds") {
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(7, "linear_fd", seed));
        const std::size_t n_in = 1 + seed % 5;
        const std::size_t n_out = 1 + (seed / 5) % 4;
        ParamSet set;
        set.add("w", random_tensor({n_out, n_in}, rng), Partition::Body);
        set.add("b", random_tensor({n_out}, rng), Partition::Body);
        set.add("test.reducer", random_tensor({1, n_out}, rng), Partition::Body);
        const auto x = testsupport::random_vector(n_in, rng);

        auto forward = [&] {
            Graph g;
            return g.scalar(g.matvec(g.linear(g.input(x), set.get("w"), set.get("b")),
                                     set.get("test.reducer")));
        };
        {
            Graph g;
            g.backward(g.matvec(g.linear(g.input(x), set.get("w"), set.get("b")),
                                set.get("test.reducer")));
        }
        const auto check = check_gradients(set, forward);
        CAPTURE(seed);
        CAPTURE(check.worst);
        CHECK(check.max_rel_err < 1e-5);
        set.zero_grads();
    }
}

TEST_CASE("embed_lookup reads rows and backward touches only that row") {
    ParamTensor table = make_param("embed.breed", Tensor({3, 2}, {0.5, -0.5, 1, 2, 3, 4}));
    Graph g;
    const auto row = g.embed_lookup(table, 0);
    CHECK(g.value(row)[0] == 0.5);
    CHECK(g.value(row)[1] == -0.5);

    ParamTensor reducer = ones_row(2);
    Graph g2;
    g2.backward(sum_of(g2, g2.embed_lookup(table, 1), reducer));
    CHECK(table.grad.at(0, 0) == 0.0);
    CHECK(table.grad.at(0, 1) == 0.0);
    CHECK(table.grad.at(1, 0) == 1.0);
    CHECK(table.grad.at(1, 1) == 1.0);
    CHECK(table.grad.at(2, 0) == 0.0);

    try {
        Graph g3;
        g3.embed_lookup(table, 5);
        FAIL("expected IndexError");
    } catch (const IndexError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("embed.breed") != std::string::npos);
        CHECK(msg.find("5") != std::string::npos);
    }
}

TEST_CASE("embed_lookup gradients match finite differences") {
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(11, "embed_fd", seed));
        ParamSet set;
        set.add("table", random_tensor({3, 2}, rng), Partition::Body);
        set.add("test.reducer", random_tensor({1, 2}, rng), Partition::Body);
        const int index = seed % 3;
        auto forward = [&] {
            Graph g;
            return g.scalar(
                g.matvec(g.embed_lookup(set.get("table"), index), set.get("test.reducer")));
        };
        {
            Graph g;
            g.backward(g.matvec(g.embed_lookup(set.get("table"), index), set.get("test.reducer")));
        }
        const auto check = check_gradients(set, forward);
        CHECK(check.max_rel_err < 1e-5);
        set.zero_grads();
    }
}

TEST_CASE("gru_cell zero parameters give zero output") {
    ParamSet set;
    for (const char* gate : {"update", "reset", "cand"}) {
        set.add("gru.w_" + std::string(gate), Tensor::zeros({4, 3}), Partition::Body);
        set.add("gru.u_" + std::string(gate), Tensor::zeros({4, 4}), Partition::Body);
        set.add("gru.b_" + std::string(gate), Tensor::zeros({4}), Partition::Body);
    }
    Graph g;
    const auto h = g.gru_cell(g.input({0.3, -0.2, 0.9}), g.input(Tensor::zeros({4})), view_of(set));
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.value(h)[i] == 0.0);
}

TEST_CASE("gru_cell saturated update gate carries the previous state") {
    Rng rng(42);
    ParamSet set = random_gru(3, 4, rng);
    set.get("gru.b_update").value.fill(-30.0);
    set.get("gru.w_update").value.fill(0.0);
    set.get("gru.u_update").value.fill(0.0);

    const std::vector<double> v = {0.7, -0.4, 0.1, 1.2};
    Graph g;
    const auto h =
        g.gru_cell(g.input({0.5, 0.5, 0.5}), g.input(Tensor::vector(v)), view_of(set));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(g.value(h)[i] == doctest::Approx(v[i]).epsilon(1e-9));
    }
}

TEST_CASE("gru_cell gradients over a 3-step unrolled sequence") {
    for (int seed = 0; seed < 30; ++seed) {
        Rng rng(derive_seed(13, "gru_fd", seed));
        ParamSet set = random_gru(3, 4, rng);
        set.add("test.reducer", random_tensor({1, 4}, rng), Partition::Body);
        std::vector<std::vector<double>> steps;
        for (int t = 0; t < 3; ++t) steps.push_back(testsupport::random_vector(3, rng));

        auto build = [&](Graph& g) {
            auto h = g.input(Tensor::zeros({4}));
            for (const auto& z : steps) h = g.gru_cell(g.input(z), h, view_of(set));
            return g.matvec(h, set.get("test.reducer"));
        };
        auto forward = [&] {
            Graph g;
            return g.scalar(build(g));
        };
        {
            Graph g;
            g.backward(build(g));
        }
        const auto check = check_gradients(set, forward);
        CAPTURE(seed);
        CAPTURE(check.worst);
        CHECK(check.max_rel_err < 1e-4);
        set.zero_grads();
    }
}

TEST_CASE("relu and concat definitions") {
    Graph g;
    const auto r = g.relu(g.input({-1.0, 0.0, 2.0}));
    CHECK(g.value(r)[0] == 0.0);
    CHECK(g.value(r)[1] == 0.0);
    CHECK(g.value(r)[2] == 2.0);

    const auto c = g.concat({g.input({1.0}), g.input({2.0, 3.0})});
    CHECK(g.value(c).size() == 3);
    CHECK(g.value(c)[0] == 1.0);
    CHECK(g.value(c)[1] == 2.0);
    CHECK(g.value(c)[2] == 3.0);

    CHECK_THROWS_AS(g.concat({}), ArgumentError);
}

TEST_CASE("concat then slice at recorded offsets recovers parts exactly") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        Graph g;
        std::vector<Graph::NodeId> parts;
        std::vector<std::vector<double>> raw;
        const int n_parts = 1 + rng.uniform_int(0, 4);
        for (int i = 0; i < n_parts; ++i) {
            raw.push_back(testsupport::random_vector(1 + rng.uniform_int(0, 6), rng));
            parts.push_back(g.input(raw.back()));
        }
        const auto cat = g.concat(parts);
        std::size_t offset = 0;
        for (const auto& part : raw) {
            const auto piece = g.slice(cat, offset, part.size());
            for (std::size_t i = 0; i < part.size(); ++i) CHECK(g.value(piece)[i] == part[i]);
            offset += part.size();
        }
    }
}

TEST_CASE("sgd_step applies the update and zeroes gradients") {
    ParamSet set;
    set.add("p", Tensor({1}, {1.0}), Partition::Body);
    set.get("p").grad[0] = 0.5;
    sgd_step(set, 0.1);
    CHECK(set.get("p").value[0] == doctest::Approx(0.95));
    CHECK(set.get("p").grad[0] == 0.0);
}

TEST_CASE("sgd_step with zero learning rate is the identity on values") {
    Rng rng(5);
    ParamSet set;
    set.add("a", random_tensor({3, 2}, rng), Partition::Body);
    set.add("b", random_tensor({4}, rng), Partition::Body);
    for (auto& p : set.params()) {
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] = rng.uniform(-1, 1);
    }
    const ParamSet before = set;
    sgd_step(set, 0.0);
    for (std::size_t k = 0; k < set.count(); ++k) {
        const auto& now = set.params()[k].value;
        const auto& was = before.params()[k].value;
        for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i] == was[i]);
        for (std::size_t i = 0; i < now.size(); ++i) CHECK(set.params()[k].grad[i] == 0.0);
    }
}

TEST_CASE("gradient accumulation is additive across backward passes") {
    ParamTensor w = make_param("w", Tensor({1, 1}, {2.0}));
    ParamTensor b = make_param("b", Tensor({1}, {0.0}));
    for (int pass = 0; pass < 2; ++pass) {
        Graph g;
        g.backward(g.linear(g.input({3.0}), w, b));
    }
    CHECK(w.grad[0] == 6.0);  // two passes of d(wx)/dw = x
    CHECK(b.grad[0] == 2.0);
}

TEST_CASE("forward passes are deterministic bit for bit") {
    Rng rng(123);
    ParamSet set;
    set.add("w", random_tensor({4, 3}, rng), Partition::Body);
    set.add("b", random_tensor({4}, rng), Partition::Body);
    const auto x = testsupport::random_vector(3, rng);
    auto run = [&] {
        Graph g;
        return g.value(g.relu(g.linear(g.input(x), set.get("w"), set.get("b")))).values();
    };
    const auto a = run();
    const auto b = run();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite inputs are rejected, never propagated") {
    Graph g;
    CHECK_THROWS_AS(g.input({std::numeric_limits<double>::infinity()}), NumericError);

    ParamTensor w = make_param("w", Tensor({1, 1}, {1e308}));
    ParamTensor b = make_param("b", Tensor({1}, {0.0}));
    Graph g2;
    CHECK_THROWS_AS(g2.linear(g2.input({1e308}), w, b), NumericError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(777);
    ParamSet set;
    set.add("embed.sex", random_tensor({3, 4}, rng), Partition::Body);
    set.add("gru.w_update", random_tensor({5, 7}, rng), Partition::Body);
    set.add("head.w1", random_tensor({2, 9}, rng), Partition::Head);
    set.add("head.b1", random_tensor({2}, rng), Partition::Head);

    const auto path = std::filesystem::temp_directory_path() / "fedstock_ckpt_test.ckpt";
    save_checkpoint(set, path);
    const ParamSet loaded = load_checkpoint(path);

    REQUIRE(loaded.count() == set.count());
    for (std::size_t k = 0; k < set.count(); ++k) {
        const auto& a = set.params()[k];
        const auto& b = loaded.params()[k];
        CHECK(a.name == b.name);
        CHECK(a.partition == b.partition);
        REQUIRE(a.value.same_shape(b.value));
        CHECK(std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(double)) == 0);
    }
    std::filesystem::remove(path);
}
