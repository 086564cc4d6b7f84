#include "fedstock/graph.hpp"

#include <cmath>

namespace fedstock {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

bool span_finite(const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

}  // namespace

Graph::Graph() {
    nodes_.reserve(256);
    varena_.reserve(4096);
    garena_.reserve(4096);
}

void Graph::reset() {
    nodes_.clear();
    varena_.clear();
    garena_.clear();
    concat_pool_.clear();
    target_pool_.clear();
    param_nodes_.clear();
}

Graph::NodeId Graph::push(Node node) {
    nodes_.push_back(node);
    return static_cast<NodeId>(nodes_.size() - 1);
}

Graph::Node Graph::fresh(Op op, std::size_t n) {
    Node node;
    node.op = op;
    node.val_off = static_cast<std::uint32_t>(varena_.size());
    node.val_len = static_cast<std::uint32_t>(n);
    varena_.resize(varena_.size() + n, 0.0);
    return node;
}

Graph::View Graph::view(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.op == Op::Param) return {n.param->value.data(), n.param->value.size()};
    return {varena_.data() + n.val_off, n.val_len};
}

double* Graph::grad_ptr(NodeId id) {
    Node& n = nodes_[id];
    if (n.op == Op::Param) return n.param->grad.data();
    if (n.grad_off < 0) {
        n.grad_off = static_cast<std::int32_t>(garena_.size());
        garena_.resize(garena_.size() + n.val_len, 0.0);
    }
    return garena_.data() + n.grad_off;
}

void Graph::check_output_finite(const Node& n, const char* op_name) const {
    if (!span_finite(varena_.data() + n.val_off, n.val_len)) {
        throw NumericError(std::string("non-finite values produced by ") + op_name);
    }
}

Tensor Graph::value(NodeId id) const {
    const View v = view(id);
    return Tensor({v.len}, std::vector<double>(v.data, v.data + v.len));
}

double Graph::scalar(NodeId id) const {
    const View v = view(id);
    if (v.len != 1) {
        throw DimensionError("expected scalar node, got length " + std::to_string(v.len));
    }
    return v.data[0];
}

Graph::NodeId Graph::input(const double* data, std::size_t n) {
    if (!span_finite(data, n)) throw NumericError("non-finite values in graph input");
    Node node = fresh(Op::Input, n);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = data[i];
    return push(node);
}

Graph::NodeId Graph::input(Tensor value) {
    if (value.rank() != 1) {
        throw DimensionError("graph inputs must be rank 1, got " + value.shape_string());
    }
    return input(value.data(), value.size());
}

Graph::NodeId Graph::input(std::vector<double> values) {
    return input(values.data(), values.size());
}

Graph::NodeId Graph::param(const ParamTensor& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    if (!p.value.same_shape(p.grad)) {
        throw DimensionError("parameter " + p.name + " grad shape " + p.grad.shape_string() +
                             " does not match value shape " + p.value.shape_string());
    }
    Node node;
    node.op = Op::Param;
    node.param = &p;
    node.requires_grad = true;
    const NodeId id = push(node);
    param_nodes_.emplace(&p, id);
    return id;
}

Graph::NodeId Graph::linear(NodeId x, const ParamTensor& weight, const ParamTensor& bias) {
    const std::size_t n_in = view(x).len;
    if (weight.value.rank() != 2 || weight.value.dim(1) != n_in) {
        throw DimensionError("linear: weight " + weight.name + " has shape " +
                             weight.value.shape_string() + ", input has shape [" +
                             std::to_string(n_in) + "]");
    }
    const std::size_t n_out = weight.value.dim(0);
    if (bias.value.rank() != 1 || bias.value.dim(0) != n_out) {
        throw DimensionError("linear: bias " + bias.name + " has shape " +
                             bias.value.shape_string() + ", expected [" + std::to_string(n_out) +
                             "]");
    }
    Node node = fresh(Op::Linear, n_out);  // may move the arena; views below
    const View xv = view(x);
    double* out = val_ptr(node);
    const double* w = weight.value.data();
    const double* bd = bias.value.data();
    for (std::size_t i = 0; i < n_out; ++i) {
        double acc = bd[i];
        const double* row = w + i * n_in;
        for (std::size_t j = 0; j < n_in; ++j) acc += row[j] * xv.data[j];
        out[i] = acc;
    }
    check_output_finite(node, "linear");
    node.argc = 3;
    node.args[0] = x;
    node.args[1] = param(weight);
    node.args[2] = param(bias);
    node.requires_grad = true;
    return push(node);
}

Graph::NodeId Graph::matvec(NodeId x, const ParamTensor& weight) {
    const std::size_t n_in = view(x).len;
    if (weight.value.rank() != 2 || weight.value.dim(1) != n_in) {
        throw DimensionError("matvec: weight " + weight.name + " has shape " +
                             weight.value.shape_string() + ", input has shape [" +
                             std::to_string(n_in) + "]");
    }
    const std::size_t n_out = weight.value.dim(0);
    Node node = fresh(Op::MatVec, n_out);
    const View xv = view(x);
    double* out = val_ptr(node);
    const double* w = weight.value.data();
    for (std::size_t i = 0; i < n_out; ++i) {
        double acc = 0.0;
        const double* row = w + i * n_in;
        for (std::size_t j = 0; j < n_in; ++j) acc += row[j] * xv.data[j];
        out[i] = acc;
    }
    check_output_finite(node, "matvec");
    node.argc = 2;
    node.args[0] = x;
    node.args[1] = param(weight);
    node.requires_grad = true;
    return push(node);
}

Graph::NodeId Graph::embed_lookup(const ParamTensor& table, int index) {
    if (table.value.rank() != 2) {
        throw DimensionError("embed_lookup: table " + table.name + " has shape " +
                             table.value.shape_string() + ", expected rank 2");
    }
    const int rows = static_cast<int>(table.value.dim(0));
    if (index < 0 || index >= rows) {
        throw IndexError("embed_lookup: index " + std::to_string(index) + " out of range for " +
                         table.name + " with " + std::to_string(rows) + " rows");
    }
    const std::size_t width = table.value.dim(1);
    Node node = fresh(Op::Embed, width);
    double* out = val_ptr(node);
    const double* row = table.value.data() + static_cast<std::size_t>(index) * width;
    for (std::size_t i = 0; i < width; ++i) out[i] = row[i];
    check_output_finite(node, "embed_lookup");
    node.argc = 1;
    node.args[0] = param(table);
    node.aux_a = index;
    node.requires_grad = true;
    return push(node);
}

Graph::NodeId Graph::sigmoid(NodeId x) {
    const std::size_t n = view(x).len;
    Node node = fresh(Op::Sigmoid, n);
    const View xv = view(x);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(xv.data[i]);
    check_output_finite(node, "sigmoid");
    node.argc = 1;
    node.args[0] = x;
    node.requires_grad = wants_grad(x);
    return push(node);
}

Graph::NodeId Graph::tanh(NodeId x) {
    const std::size_t n = view(x).len;
    Node node = fresh(Op::Tanh, n);
    const View xv = view(x);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(xv.data[i]);
    check_output_finite(node, "tanh");
    node.argc = 1;
    node.args[0] = x;
    node.requires_grad = wants_grad(x);
    return push(node);
}

Graph::NodeId Graph::relu(NodeId x) {
    const std::size_t n = view(x).len;
    Node node = fresh(Op::Relu, n);
    const View xv = view(x);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = xv.data[i] > 0.0 ? xv.data[i] : 0.0;
    check_output_finite(node, "relu");
    node.argc = 1;
    node.args[0] = x;
    node.requires_grad = wants_grad(x);
    return push(node);
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    const std::size_t n = view(a).len;
    if (n != view(b).len) {
        throw DimensionError("add: lengths " + std::to_string(n) + " and " +
                             std::to_string(view(b).len));
    }
    Node node = fresh(Op::Add, n);
    const View av = view(a);
    const View bv = view(b);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = av.data[i] + bv.data[i];
    check_output_finite(node, "add");
    node.argc = 2;
    node.args[0] = a;
    node.args[1] = b;
    node.requires_grad = wants_grad(a) || wants_grad(b);
    return push(node);
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    const std::size_t n = view(a).len;
    if (n != view(b).len) {
        throw DimensionError("mul: lengths " + std::to_string(n) + " and " +
                             std::to_string(view(b).len));
    }
    Node node = fresh(Op::Mul, n);
    const View av = view(a);
    const View bv = view(b);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = av.data[i] * bv.data[i];
    check_output_finite(node, "mul");
    node.argc = 2;
    node.args[0] = a;
    node.args[1] = b;
    node.requires_grad = wants_grad(a) || wants_grad(b);
    return push(node);
}

Graph::NodeId Graph::one_minus(NodeId x) {
    const std::size_t n = view(x).len;
    Node node = fresh(Op::OneMinus, n);
    const View xv = view(x);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 - xv.data[i];
    check_output_finite(node, "one_minus");
    node.argc = 1;
    node.args[0] = x;
    node.requires_grad = wants_grad(x);
    return push(node);
}

Graph::NodeId Graph::concat(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ArgumentError("concat: empty part list");
    std::size_t total = 0;
    bool needs_grad = false;
    for (NodeId part : parts) {
        total += view(part).len;
        needs_grad = needs_grad || wants_grad(part);
    }
    Node node = fresh(Op::Concat, total);
    double* out = val_ptr(node);
    std::size_t offset = 0;
    for (NodeId part : parts) {
        const View pv = view(part);  // re-derived after fresh()
        for (std::size_t i = 0; i < pv.len; ++i) out[offset + i] = pv.data[i];
        offset += pv.len;
    }
    node.aux_a = static_cast<std::int32_t>(concat_pool_.size());
    node.aux_b = static_cast<std::int32_t>(parts.size());
    node.requires_grad = needs_grad;
    concat_pool_.insert(concat_pool_.end(), parts.begin(), parts.end());
    return push(node);
}

Graph::NodeId Graph::slice(NodeId x, std::size_t start, std::size_t length) {
    if (start + length > view(x).len) {
        throw DimensionError("slice: [" + std::to_string(start) + ", " +
                             std::to_string(start + length) + ") out of range for length " +
                             std::to_string(view(x).len));
    }
    Node node = fresh(Op::Slice, length);
    const View xv = view(x);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < length; ++i) out[i] = xv.data[start + i];
    node.argc = 1;
    node.args[0] = x;
    node.aux_a = static_cast<std::int32_t>(start);
    node.aux_b = static_cast<std::int32_t>(length);
    node.requires_grad = wants_grad(x);
    return push(node);
}

Graph::NodeId Graph::clamp(NodeId x, double lo, double hi) {
    const std::size_t n = view(x).len;
    Node node = fresh(Op::Clamp, n);
    const View xv = view(x);
    double* out = val_ptr(node);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = xv.data[i] < lo ? lo : (xv.data[i] > hi ? hi : xv.data[i]);
    }
    node.argc = 1;
    node.args[0] = x;
    node.lo = lo;
    node.hi = hi;
    node.requires_grad = wants_grad(x);
    return push(node);
}

Graph::NodeId Graph::gaussian_nll(NodeId mu, NodeId log_var, const Tensor& target) {
    const View mv = view(mu);
    const View lv = view(log_var);
    if (mv.len != lv.len || mv.len != target.size() || target.rank() != 1 || mv.len == 0) {
        throw DimensionError("gaussian_nll: mu length " + std::to_string(mv.len) +
                             ", log_var length " + std::to_string(lv.len) + ", target " +
                             target.shape_string());
    }
    if (!target.all_finite()) throw NumericError("gaussian_nll: non-finite target");
    const std::size_t horizon = mv.len;
    double loss = 0.0;
    for (std::size_t h = 0; h < horizon; ++h) {
        const double resid = target[h] - mv.data[h];
        loss += lv.data[h] + resid * resid * std::exp(-lv.data[h]);
    }
    loss /= 2.0 * static_cast<double>(horizon);
    Node node = fresh(Op::GaussianNll, 1);
    val_ptr(node)[0] = loss;
    check_output_finite(node, "gaussian_nll");
    node.argc = 2;
    node.args[0] = mu;
    node.args[1] = log_var;
    node.aux_a = static_cast<std::int32_t>(target_pool_.size());
    node.aux_b = static_cast<std::int32_t>(horizon);
    node.requires_grad = wants_grad(mu) || wants_grad(log_var);
    target_pool_.insert(target_pool_.end(), target.values().begin(), target.values().end());
    return push(node);
}

Graph::NodeId Graph::gru_cell(NodeId z, NodeId h_prev, const GruCellParams& p) {
    const NodeId update_gate =
        sigmoid(add(linear(z, *p.w_update, *p.b_update), matvec(h_prev, *p.u_update)));
    if (!span_finite(view(update_gate).data, view(update_gate).len)) {
        throw NumericError("gru_cell: non-finite values in update gate");
    }
    const NodeId reset_gate =
        sigmoid(add(linear(z, *p.w_reset, *p.b_reset), matvec(h_prev, *p.u_reset)));
    if (!span_finite(view(reset_gate).data, view(reset_gate).len)) {
        throw NumericError("gru_cell: non-finite values in reset gate");
    }
    const NodeId candidate =
        tanh(add(linear(z, *p.w_cand, *p.b_cand), matvec(mul(reset_gate, h_prev), *p.u_cand)));
    if (!span_finite(view(candidate).data, view(candidate).len)) {
        throw NumericError("gru_cell: non-finite values in candidate state");
    }
    const NodeId out = add(mul(one_minus(update_gate), h_prev), mul(update_gate, candidate));
    if (!span_finite(view(out).data, view(out).len)) {
        throw NumericError("gru_cell: non-finite values in output state");
    }
    return out;
}

void Graph::backward(NodeId loss) {
    const View lv = view(loss);
    if (lv.len != 1) {
        throw DimensionError("backward: loss node must be scalar, got length " +
                             std::to_string(lv.len));
    }
    // One reservation bounds all node gradients; pointers into garena_ stay
    // valid for the whole reverse sweep.
    garena_.reserve(garena_.size() + varena_.size());
    grad_ptr(loss)[0] += 1.0;
    for (NodeId id = loss + 1; id-- > 0;) {
        backprop_node(id);
    }
}

void Graph::backprop_node(NodeId id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.op == Op::Param || n.op == Op::Input) return;
    if (n.grad_off < 0) return;  // not on the path to the loss
    const double* gy = garena_.data() + n.grad_off;

    switch (n.op) {
        case Op::Linear:
        case Op::MatVec: {
            const View xv = view(n.args[0]);
            const ParamTensor& weight = *nodes_[n.args[1]].param;
            const std::size_t n_out = weight.value.dim(0);
            const std::size_t n_in = weight.value.dim(1);
            const double* w = weight.value.data();
            double* gw = weight.grad.data();
            for (std::size_t i = 0; i < n_out; ++i) {
                const double g = gy[i];
                if (g == 0.0) continue;
                double* grow = gw + i * n_in;
                for (std::size_t j = 0; j < n_in; ++j) grow[j] += g * xv.data[j];
            }
            if (wants_grad(n.args[0])) {
                double* gx = grad_ptr(n.args[0]);
                for (std::size_t i = 0; i < n_out; ++i) {
                    const double g = gy[i];
                    if (g == 0.0) continue;
                    const double* row = w + i * n_in;
                    for (std::size_t j = 0; j < n_in; ++j) gx[j] += g * row[j];
                }
            }
            if (n.op == Op::Linear) {
                double* gb = nodes_[n.args[2]].param->grad.data();
                for (std::size_t i = 0; i < n_out; ++i) gb[i] += gy[i];
            }
            break;
        }
        case Op::Embed: {
            const ParamTensor& table = *nodes_[n.args[0]].param;
            const std::size_t width = table.value.dim(1);
            double* grow = table.grad.data() + static_cast<std::size_t>(n.aux_a) * width;
            for (std::size_t i = 0; i < width; ++i) grow[i] += gy[i];
            break;
        }
        case Op::Sigmoid: {
            if (!wants_grad(n.args[0])) break;
            double* gx = grad_ptr(n.args[0]);
            const double* y = varena_.data() + n.val_off;
            for (std::size_t i = 0; i < n.val_len; ++i) gx[i] += gy[i] * y[i] * (1.0 - y[i]);
            break;
        }
        case Op::Tanh: {
            if (!wants_grad(n.args[0])) break;
            double* gx = grad_ptr(n.args[0]);
            const double* y = varena_.data() + n.val_off;
            for (std::size_t i = 0; i < n.val_len; ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
            break;
        }
        case Op::Relu: {
            if (!wants_grad(n.args[0])) break;
            double* gx = grad_ptr(n.args[0]);
            const View xv = view(n.args[0]);
            for (std::size_t i = 0; i < xv.len; ++i) {
                if (xv.data[i] > 0.0) gx[i] += gy[i];
            }
            break;
        }
        case Op::Add: {
            for (int arg = 0; arg < 2; ++arg) {
                if (!wants_grad(n.args[arg])) continue;
                double* gx = grad_ptr(n.args[arg]);
                for (std::size_t i = 0; i < n.val_len; ++i) gx[i] += gy[i];
            }
            break;
        }
        case Op::Mul: {
            if (wants_grad(n.args[0])) {
                double* ga = grad_ptr(n.args[0]);
                const View bv = view(n.args[1]);
                for (std::size_t i = 0; i < n.val_len; ++i) ga[i] += gy[i] * bv.data[i];
            }
            if (wants_grad(n.args[1])) {
                double* gb = grad_ptr(n.args[1]);
                const View av = view(n.args[0]);
                for (std::size_t i = 0; i < n.val_len; ++i) gb[i] += gy[i] * av.data[i];
            }
            break;
        }
        case Op::OneMinus: {
            if (!wants_grad(n.args[0])) break;
            double* gx = grad_ptr(n.args[0]);
            for (std::size_t i = 0; i < n.val_len; ++i) gx[i] -= gy[i];
            break;
        }
        case Op::Concat: {
            std::size_t offset = 0;
            for (std::int32_t k = 0; k < n.aux_b; ++k) {
                const NodeId part = concat_pool_[static_cast<std::size_t>(n.aux_a) + k];
                const std::size_t len = view(part).len;
                if (wants_grad(part)) {
                    double* gp = grad_ptr(part);
                    for (std::size_t i = 0; i < len; ++i) gp[i] += gy[offset + i];
                }
                offset += len;
            }
            break;
        }
        case Op::Slice: {
            if (!wants_grad(n.args[0])) break;
            double* gx = grad_ptr(n.args[0]);
            const auto start = static_cast<std::size_t>(n.aux_a);
            const auto len = static_cast<std::size_t>(n.aux_b);
            for (std::size_t i = 0; i < len; ++i) gx[start + i] += gy[i];
            break;
        }
        case Op::Clamp: {
            if (!wants_grad(n.args[0])) break;
            double* gx = grad_ptr(n.args[0]);
            const View xv = view(n.args[0]);
            for (std::size_t i = 0; i < xv.len; ++i) {
                if (xv.data[i] >= n.lo && xv.data[i] <= n.hi) gx[i] += gy[i];
            }
            break;
        }
        case Op::GaussianNll: {
            const View mv = view(n.args[0]);
            const View lv = view(n.args[1]);
            const double* target = target_pool_.data() + n.aux_a;
            const auto horizon = static_cast<std::size_t>(n.aux_b);
            const double g = gy[0];
            const double inv_h = 1.0 / static_cast<double>(horizon);
            const bool want_mu = wants_grad(n.args[0]);
            const bool want_lv = wants_grad(n.args[1]);
            double* gmu = want_mu ? grad_ptr(n.args[0]) : nullptr;
            double* glv = want_lv ? grad_ptr(n.args[1]) : nullptr;
            for (std::size_t h = 0; h < horizon; ++h) {
                const double inv_var = std::exp(-lv.data[h]);
                const double resid = target[h] - mv.data[h];
                if (gmu != nullptr) gmu[h] += g * (mv.data[h] - target[h]) * inv_var * inv_h;
                if (glv != nullptr) glv[h] += g * 0.5 * inv_h * (1.0 - resid * resid * inv_var);
            }
            break;
        }
        case Op::Input:
        case Op::Param:
            break;
    }
}

}  // namespace fedstock
