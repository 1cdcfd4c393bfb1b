#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vpn/diff/tensor.hpp"

namespace vpn::diff {

enum class Op {
    leaf,
    matmul,
    linear,
    add,
    sub,
    scale,
    elementwise_mul,
    tanh,
    sigmoid,
    relu,
    log,
    softmax_lastdim,
    sum_axis,
    mean_axis,
    sum_all,
    conv2d,
    conv3d,
    avg_pool3d,
    reshape,
    permute,
    slice,
    concat,
    l2_normalize_eps,
    broadcast_mul,
    broadcast_add,
    inflate,
    batch_norm,
    dropout,
    clamp_min,
    pick,
};

inline constexpr std::string_view op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul: return "matmul";
        case Op::linear: return "linear";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::scale: return "scale";
        case Op::elementwise_mul: return "elementwise_mul";
        case Op::tanh: return "tanh";
        case Op::sigmoid: return "sigmoid";
        case Op::relu: return "relu";
        case Op::log: return "log";
        case Op::softmax_lastdim: return "softmax_lastdim";
        case Op::sum_axis: return "sum_axis";
        case Op::mean_axis: return "mean_axis";
        case Op::sum_all: return "sum_all";
        case Op::conv2d: return "conv2d";
        case Op::conv3d: return "conv3d";
        case Op::avg_pool3d: return "avg_pool3d";
        case Op::reshape: return "reshape";
        case Op::permute: return "permute";
        case Op::slice: return "slice";
        case Op::concat: return "concat";
        case Op::l2_normalize_eps: return "l2_normalize_eps";
        case Op::broadcast_mul: return "broadcast_mul";
        case Op::broadcast_add: return "broadcast_add";
        case Op::inflate: return "inflate";
        case Op::batch_norm: return "batch_norm";
        case Op::dropout: return "dropout";
        case Op::clamp_min: return "clamp_min";
        case Op::pick: return "pick";
    }
    return "?";
}

class Tape;
class Var;
class Gradients;
Gradients backward(Tape& tape, const Var& root);

/// A value flowing through a computation.
///
/// A Var either lives on a tape (it is a leaf that requires grad, or it was
/// computed from one) or is a plain constant carrying only its value.
class Var {
public:
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    Var() = default;
    /// Constant, not recorded anywhere.
    explicit Var(Tensor value) : value_(std::move(value)) {}

    const Tensor& value() const { return value_; }
    const Shape& shape() const { return value_.shape(); }
    bool requires_grad() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::size_t node() const { return node_; }

private:
    friend class Tape;
    Var(Tensor value, Tape* tape, std::size_t node) : value_(std::move(value)), tape_(tape), node_(node) {}

    Tensor value_;
    Tape* tape_ = nullptr;
    std::size_t node_ = npos;
};

/// Gradient buffers handed to a node's backward function. `in[k]` is null
/// when input k does not require grad.
struct BackwardContext {
    std::span<const double> grad_out;
    std::vector<double*> in;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Append-only record of a computation, in topological order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value) {
        nodes_.push_back(Node{Op::leaf, {}, value.shape(), value.size(), {}});
        return Var(std::move(value), this, nodes_.size() - 1);
    }

    /// Records the result of `op` over `inputs`. Inputs that do not live on
    /// this tape are treated as constants.
    Var record(Op op, Tensor value, std::span<const Var* const> inputs, BackwardFn backward) {
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const Var* v : inputs) {
            detail::require(v->tape_ == nullptr || v->tape_ == this, op_name(op), ": inputs live on different tapes");
            ids.push_back(v->tape_ ? v->node_ : Var::npos);
        }
        nodes_.push_back(Node{op, std::move(ids), value.shape(), value.size(), std::move(backward)});
        return Var(std::move(value), this, nodes_.size() - 1);
    }

    std::size_t size() const { return nodes_.size(); }
    Op op_at(std::size_t i) const { return nodes_.at(i).op; }
    const std::vector<std::size_t>& inputs_at(std::size_t i) const { return nodes_.at(i).inputs; }

private:
    friend class Gradients;
    friend Gradients backward(Tape& tape, const Var& root);

    struct Node {
        Op op;
        std::vector<std::size_t> inputs;
        Shape shape;
        std::size_t size;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

/// Result of a backward pass: one gradient per leaf of the tape.
class Gradients {
public:
    const Tensor& operator[](const Var& leaf) const {
        detail::require<NonFiniteError>(finite(leaf), "gradient is not finite");
        auto it = grads_.find(leaf.node());
        detail::require(leaf.tape() != nullptr && it != grads_.end(), "no gradient recorded for this variable");
        return it->second;
    }
    bool contains(const Var& leaf) const {
        return leaf.tape() && (grads_.count(leaf.node()) || non_finite_.count(leaf.node()));
    }
    /// False when some entry of the leaf's gradient is NaN or infinite.
    bool finite(const Var& leaf) const { return !leaf.tape() || !non_finite_.count(leaf.node()); }
    std::size_t size() const { return grads_.size() + non_finite_.size(); }

private:
    friend Gradients backward(Tape& tape, const Var& root);
    std::unordered_map<std::size_t, Tensor> grads_;
    std::unordered_set<std::size_t> non_finite_;
};

/// Reverse-mode pass from a scalar root. Contributions are accumulated in
/// reverse tape order, so identical tapes give bit-identical gradients.
inline Gradients backward(Tape& tape, const Var& root) {
    detail::require(root.tape() == &tape, "backward: root was not produced on this tape");
    detail::require<ShapeError>(root.value().size() == 1, "backward: root must be scalar, got shape ",
                                to_string(root.shape()));
    const std::size_t n = root.node() + 1;
    std::vector<std::vector<double>> grads(n);
    grads[root.node()] = {1.0};

    BackwardContext ctx;
    for (std::size_t i = n; i-- > 0;) {
        auto& node = tape.nodes_[i];
        if (node.op == Op::leaf || grads[i].empty()) continue;
        ctx.grad_out = grads[i];
        ctx.in.assign(node.inputs.size(), nullptr);
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            std::size_t id = node.inputs[k];
            if (id == Var::npos) continue;
            if (grads[id].empty()) grads[id].assign(tape.nodes_[id].size, 0.0);
            ctx.in[k] = grads[id].data();
        }
        node.backward(ctx);
        std::vector<double>().swap(grads[i]);
    }

    Gradients out;
    for (std::size_t i = 0; i < tape.nodes_.size(); ++i) {
        if (tape.nodes_[i].op != Op::leaf) continue;
        std::vector<double> g = i < n && !grads[i].empty() ? std::move(grads[i])
                                                           : std::vector<double>(tape.nodes_[i].size, 0.0);
        if (std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); }))
            out.grads_.emplace(i, Tensor(tape.nodes_[i].shape, std::move(g)));
        else
            out.non_finite_.insert(i);
    }
    return out;
}

}  // namespace vpn::diff
