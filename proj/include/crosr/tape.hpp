#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>

#include "crosr/error.hpp"
#include "crosr/tensor.hpp"

namespace crosr::nn {

// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

// Records primitive operations in execution order so that adjoints can be
// replayed in reverse. Creation order is a topological order of the graph.
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    // A value that never receives a gradient.
    Var constant(Tensor value) { return push(std::move(value), nullptr, false, {}); }

    // A differentiable leaf owning its value.
    Var variable(Tensor value) { return push(std::move(value), nullptr, true, {}); }

    // A differentiable leaf that borrows storage; `value` must outlive the tape.
    Var parameter(const Tensor& value) { return push(Tensor{}, &value, true, {}); }

    // Records the result of a primitive. The node takes part in backward
    // only when one of its inputs does.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        if (!value.all_finite()) {
            throw NumericalError("non-finite value produced by primitive at tape node " +
                                 std::to_string(nodes_.size()));
        }
        bool needs = false;
        for (auto in : inputs) needs = needs || nodes_[in.id].requires_grad;
        return push(std::move(value), nullptr, needs, needs ? std::move(backward) : BackwardFn{});
    }

    const Tensor& value(Var v) const {
        const auto& n = nodes_[v.id];
        return n.borrowed ? *n.borrowed : n.owned;
    }

    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    // Gradient of the last backward() target with respect to `v`; zeros when
    // no path reached it.
    Tensor grad(Var v) const {
        const auto& n = nodes_[v.id];
        if (n.grad.empty()) return Tensor::zeros(value(v).shape());
        return n.grad;
    }

    // Mutable gradient buffer for accumulation, allocated on first use.
    std::span<double> grad_buffer(Var v) {
        auto& n = nodes_[v.id];
        if (n.grad.empty()) n.grad = Tensor::zeros(value(v).shape());
        return n.grad.data();
    }

    void accumulate(Var v, std::span<const double> g) {
        if (!nodes_[v.id].requires_grad) return;
        auto buf = grad_buffer(v);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }

    // Seeds d(target)/d(target) = 1 and runs adjoints in reverse creation
    // order. Gradients from fan-out accumulate additively.
    void backward(Var target) {
        if (value(target).size() != 1) {
            throw ConfigError("backward target must be a scalar, got shape " +
                              shape_string(value(target).shape()));
        }
        for (auto& n : nodes_) n.grad = Tensor{};
        if (!nodes_[target.id].requires_grad) return;
        grad_buffer(target)[0] = 1.0;
        for (std::size_t i = target.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, n.grad);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    // Hash of every piecewise-linear branch taken so far (ReLU masks, pooling
    // argmax positions). Two forward passes with equal signatures lie on the
    // same linear piece of the network.
    std::uint64_t activation_signature() const noexcept { return signature_; }

    void mix_signature(std::uint64_t v) noexcept {
        signature_ ^= v + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
    }

   private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Tensor owned, const Tensor* borrowed, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(owned), borrowed, Tensor{}, requires_grad, std::move(backward)});
        return Var{nodes_.size() - 1};
    }

    std::deque<Node> nodes_;
    std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

}  // namespace crosr::nn
