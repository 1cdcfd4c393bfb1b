#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "vpn/diff/gradcheck.hpp"
#include "vpn/diff/ops.hpp"

namespace vpn {

using diff::Shape;
using diff::Tensor;
using diff::Var;

/// Named parameter tensors in insertion order.
class ParameterSet {
public:
    void add(const std::string& name, Tensor value) {
        detail::require(!values_.count(name), "parameter '", name, "' already exists");
        order_.push_back(name);
        values_.emplace(name, std::move(value));
    }

    const Tensor& get(const std::string& name) const {
        auto it = values_.find(name);
        detail::require(it != values_.end(), "unknown parameter '", name, "'");
        return it->second;
    }

    void set(const std::string& name, Tensor value) {
        auto it = values_.find(name);
        detail::require(it != values_.end(), "unknown parameter '", name, "'");
        detail::require<ShapeError>(it->second.shape() == value.shape(), "parameter '", name, "' has shape ",
                                    diff::to_string(it->second.shape()), ", got ", diff::to_string(value.shape()));
        it->second = std::move(value);
    }

    bool contains(const std::string& name) const { return values_.count(name) > 0; }
    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : values_) n += t.size();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> values_;
};

/// Parameters as seen by one forward pass: tape leaves when a tape is
/// supplied (training, gradient checks), constants otherwise.
class Binding {
public:
    Binding(const ParameterSet& params, diff::Tape* tape) : params_(&params), tape_(tape) {}

    const Var& operator()(const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        const Tensor& value = params_->get(name);
        Var v = tape_ ? tape_->leaf(value) : Var(value);
        return vars_.emplace(name, std::move(v)).first->second;
    }

    /// Binds `name` to an existing variable instead of a fresh leaf.
    void preset(const std::string& name, Var v) {
        detail::require<ShapeError>(v.shape() == params_->get(name).shape(), "preset of '", name, "' changes its shape");
        vars_.insert_or_assign(name, std::move(v));
    }

    diff::Tape* tape() const { return tape_; }
    const ParameterSet& parameters() const { return *params_; }
    const std::map<std::string, Var>& used() const { return vars_; }

private:
    const ParameterSet* params_;
    diff::Tape* tape_;
    std::map<std::string, Var> vars_;
};

/// splitmix64 step, used to derive independent seeds from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_name(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}

/// Uniform in ±sqrt(6/(fan_in+fan_out)), drawn from a stream keyed by the
/// parameter name so that adding a parameter never shifts another's values.
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed,
                             const std::string& name) {
    std::mt19937_64 rng(mix_seed(seed, hash_name(name)));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(diff::numel(shape));
    for (auto& x : v) x = (2.0 * diff::uniform01(rng) - 1.0) * limit;
    return Tensor(std::move(shape), std::move(v));
}

}  // namespace vpn

namespace vpn {

using RunningStats = std::map<std::string, diff::BatchStats>;

/// Everything a forward pass needs besides its inputs.
struct ForwardContext {
    Binding& bind;
    bool training = false;
    std::mt19937_64* dropout_rng = nullptr;     ///< null disables dropout
    const RunningStats* running = nullptr;       ///< batch-norm statistics used in evaluation
    RunningStats* batch_stats = nullptr;         ///< receives batch statistics in training
    double bn_eps = 1e-5;
};

/// Batch normalization keyed by layer name, in the context's mode.
inline Var batch_norm_layer(ForwardContext& ctx, const std::string& name, const Var& x) {
    const Var& gamma = ctx.bind(name + ".gamma");
    const Var& beta = ctx.bind(name + ".beta");
    if (ctx.training) {
        diff::BatchStats stats;
        Var y = diff::batch_norm(x, gamma, beta, ctx.bn_eps, true, nullptr, &stats);
        if (ctx.batch_stats) (*ctx.batch_stats)[name] = std::move(stats);
        return y;
    }
    detail::require(ctx.running && ctx.running->count(name), "no running statistics for batch-norm layer '", name,
                    "'");
    return diff::batch_norm(x, gamma, beta, ctx.bn_eps, false, &ctx.running->at(name));
}

/// Finite-difference check of `fn` with respect to the named parameters.
inline diff::GradCheckReport gradcheck_parameters(const ParameterSet& params, const std::vector<std::string>& names,
                                                  const std::function<Var(Binding&)>& fn, double step = 1e-5) {
    std::vector<Tensor> values;
    for (const auto& n : names) values.push_back(params.get(n));
    diff::ScalarFn scalar = [&](diff::Tape& tape, const std::vector<Var>& leaves) {
        Binding bind(params, &tape);
        for (std::size_t i = 0; i < names.size(); ++i) bind.preset(names[i], leaves[i]);
        return fn(bind);
    };
    return diff::finite_difference_check(scalar, values, step);
}

}  // namespace vpn
