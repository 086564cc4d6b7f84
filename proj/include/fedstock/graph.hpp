#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedstock/params.hpp"
#include "fedstock/tensor.hpp"

namespace fedstock {

// Weight views for one GRU cell application. Naming follows the gate roles:
// update gate u, reset gate r, candidate state. All pointers are non-owning.
struct GruCellParams {
    const ParamTensor* w_update = nullptr;  // [d_h x d_in]
    const ParamTensor* u_update = nullptr;  // [d_h x d_h]
    const ParamTensor* b_update = nullptr;  // [d_h]
    const ParamTensor* w_reset = nullptr;
    const ParamTensor* u_reset = nullptr;
    const ParamTensor* b_reset = nullptr;
    const ParamTensor* w_cand = nullptr;
    const ParamTensor* u_cand = nullptr;
    const ParamTensor* b_cand = nullptr;
};

// Reverse-mode tape over the fixed set of operations the growth model needs.
// backward() walks the tape in reverse and accumulates gradients of bound
// parameters directly into ParamTensor::grad. Accumulation is additive across
// passes; sgd_step() zeroes it.
//
// Node values and gradients live in flat arenas owned by the graph; reset()
// clears the tape while keeping the buffers, so a training loop can reuse one
// Graph per instance without allocation churn.
//
// Every operation validates shapes up front and checks its output for
// non-finite values, so NaN/Inf surface as NumericError at the op that
// produced them instead of propagating.
class Graph {
public:
    using NodeId = std::uint32_t;

    Graph();

    // Drops all nodes but keeps arena capacity.
    void reset();

    // Leaf holding a constant vector input; no gradient flows into it.
    NodeId input(Tensor value);
    NodeId input(std::vector<double> values);
    NodeId input(const double* data, std::size_t n);

    // Leaf bound to a parameter. Repeated calls with the same ParamTensor
    // return the same node.
    NodeId param(const ParamTensor& p);

    // y = W x + b
    NodeId linear(NodeId x, const ParamTensor& weight, const ParamTensor& bias);
    // y = W x
    NodeId matvec(NodeId x, const ParamTensor& weight);
    // Row lookup into an embedding table.
    NodeId embed_lookup(const ParamTensor& table, int index);

    NodeId sigmoid(NodeId x);
    NodeId tanh(NodeId x);
    NodeId relu(NodeId x);
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId one_minus(NodeId x);  // 1 - x
    NodeId concat(const std::vector<NodeId>& parts);
    NodeId slice(NodeId x, std::size_t start, std::size_t length);
    NodeId clamp(NodeId x, double lo, double hi);

    // Mean Gaussian negative log-likelihood over the horizon:
    //   (1 / 2H) * sum_h [ log_var_h + (y_h - mu_h)^2 / exp(log_var_h) ]
    NodeId gaussian_nll(NodeId mu, NodeId log_var, const Tensor& target);

    // One GRU step: u = sig(Wu z + Uu h + bu), r = sig(Wr z + Ur h + br),
    // cand = tanh(Wc z + Uc (r . h) + bc), out = (1 - u) . h + u . cand.
    NodeId gru_cell(NodeId z, NodeId h_prev, const GruCellParams& p);

    // Copy of the node's value (nodes are rank-1).
    Tensor value(NodeId id) const;
    double scalar(NodeId id) const;

    // Reverse pass seeded with d(loss)/d(loss) = 1. `loss` must be scalar.
    void backward(NodeId loss);

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        Input,
        Param,
        Linear,
        MatVec,
        Embed,
        Sigmoid,
        Tanh,
        Relu,
        Add,
        Mul,
        OneMinus,
        Concat,
        Slice,
        Clamp,
        GaussianNll,
    };

    struct Node {
        const ParamTensor* param = nullptr;  // Param nodes only
        std::uint32_t val_off = 0;
        std::uint32_t val_len = 0;
        std::int32_t grad_off = -1;  // lazily assigned during backward
        Op op = Op::Input;
        bool requires_grad = false;
        std::uint8_t argc = 0;
        NodeId args[3] = {0, 0, 0};
        std::int32_t aux_a = 0;  // embed row | slice start | concat/target pool offset
        std::int32_t aux_b = 0;  // slice length | concat part count | nll horizon
        double lo = 0.0;
        double hi = 0.0;
    };

    struct View {
        const double* data;
        std::size_t len;
    };

    NodeId push(Node node);
    // Appends a value slot of length n; returns the node with storage wired.
    Node fresh(Op op, std::size_t n);
    double* val_ptr(const Node& n) { return varena_.data() + n.val_off; }
    View view(NodeId id) const;
    double* grad_ptr(NodeId id);  // allocates (zeroed) on first use
    bool wants_grad(NodeId id) const { return nodes_[id].requires_grad; }
    void check_output_finite(const Node& n, const char* op_name) const;
    void backprop_node(NodeId id);

    std::vector<Node> nodes_;
    std::vector<double> varena_;
    std::vector<double> garena_;
    std::vector<NodeId> concat_pool_;
    std::vector<double> target_pool_;
    std::unordered_map<const ParamTensor*, NodeId> param_nodes_;
};

}  // namespace fedstock
