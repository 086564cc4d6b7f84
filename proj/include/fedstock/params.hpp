#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedstock/errors.hpp"
#include "fedstock/tensor.hpp"

namespace fedstock {

// Which side of the personalization split a parameter belongs to. HEAD covers
// exactly the final fully connected layers; everything else is BODY.
enum class Partition : std::uint8_t { Body, Head };

inline const char* partition_name(Partition p) {
    return p == Partition::Head ? "head" : "body";
}

// A named parameter tensor with its gradient accumulator. Gradients are
// mutable so that read-only parameter sets can still run backward passes;
// a ParamSet remains single-writer during training.
struct ParamTensor {
    std::string name;
    Tensor value;
    mutable Tensor grad;
    Partition partition = Partition::Body;

    ParamTensor() = default;
    ParamTensor(std::string param_name, Tensor initial, Partition part)
        : name(std::move(param_name)),
          value(std::move(initial)),
          grad(Tensor::zeros(value.shape())),
          partition(part) {}
};

// Ordered, uniquely named collection of parameters. Copying a ParamSet copies
// values and gradients; this is the broadcast-by-value primitive of the
// federation protocol.
class ParamSet {
public:
    ParamTensor& add(std::string name, Tensor value, Partition partition) {
        if (find(name) != nullptr) {
            throw ArgumentError("duplicate parameter name: " + name);
        }
        params_.emplace_back(std::move(name), std::move(value), partition);
        return params_.back();
    }

    std::size_t count() const { return params_.size(); }
    bool empty() const { return params_.empty(); }

    std::vector<ParamTensor>& params() { return params_; }
    const std::vector<ParamTensor>& params() const { return params_; }

    ParamTensor* find(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }
    const ParamTensor* find(const std::string& name) const {
        return const_cast<ParamSet*>(this)->find(name);
    }

    ParamTensor& get(const std::string& name) {
        if (auto* p = find(name)) return *p;
        throw ArgumentError("unknown parameter: " + name);
    }
    const ParamTensor& get(const std::string& name) const {
        return const_cast<ParamSet*>(this)->get(name);
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(0.0);
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    // Subset copy containing only the parameters with the given tag, in order.
    ParamSet filter(Partition partition) const {
        ParamSet out;
        for (const auto& p : params_) {
            if (p.partition == partition) out.add(p.name, p.value, p.partition);
        }
        return out;
    }

    bool has_partition(Partition partition) const {
        for (const auto& p : params_) {
            if (p.partition == partition) return true;
        }
        return false;
    }

    // Overwrites the values of every parameter that exists in `source`
    // (matched by name). Shapes must agree.
    void assign_from(const ParamSet& source) {
        for (const auto& src : source.params_) {
            ParamTensor* dst = find(src.name);
            if (dst == nullptr) {
                throw ProtocolError("parameter " + src.name + " missing from destination set");
            }
            if (!dst->value.same_shape(src.value)) {
                throw ProtocolError("parameter " + src.name + " shape mismatch: " +
                                    dst->value.shape_string() + " vs " + src.value.shape_string());
            }
            dst->value = src.value;
        }
    }

    // Structural identity over names, order, shapes, and tags.
    bool same_structure(const ParamSet& other, std::string* first_mismatch = nullptr) const {
        if (params_.size() != other.params_.size()) {
            if (first_mismatch) *first_mismatch = "<parameter count>";
            return false;
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& a = params_[i];
            const auto& b = other.params_[i];
            if (a.name != b.name || !a.value.same_shape(b.value) || a.partition != b.partition) {
                if (first_mismatch) *first_mismatch = a.name;
                return false;
            }
        }
        return true;
    }

private:
    std::vector<ParamTensor> params_;
};

// Plain SGD: value <- value - lr * grad for every parameter, then grads are
// zeroed. Updates that would produce a non-finite value raise NumericError.
inline void sgd_step(ParamSet& params, double learning_rate) {
    for (auto& p : params.params()) {
        double* v = p.value.data();
        const double* g = p.grad.data();
        const std::size_t n = p.value.size();
        for (std::size_t i = 0; i < n; ++i) {
            const double next = v[i] - learning_rate * g[i];
            if (!std::isfinite(next)) {
                throw NumericError("sgd_step produced non-finite value in " + p.name);
            }
            v[i] = next;
        }
        p.grad.fill(0.0);
    }
}

}  // namespace fedstock
