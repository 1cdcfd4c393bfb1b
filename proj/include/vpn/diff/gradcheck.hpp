#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "vpn/diff/tape.hpp"

namespace vpn::diff {

/// Builds a scalar on `tape` from leaves holding the parameters.
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<double> per_param;  ///< max relative error per parameter tensor
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates = 0;
};

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

namespace detail {
inline double evaluate(const ScalarFn& fn, const std::vector<Tensor>& params) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    return fn(tape, leaves).value().item();
}
}  // namespace detail

/// Compares the tape gradient of `fn` against central differences on every
/// coordinate of every parameter.
inline GradCheckReport finite_difference_check(const ScalarFn& fn, const std::vector<Tensor>& params, double step) {
    vpn::detail::require(step > 0.0, "finite_difference_check: step must be positive");

    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var root = fn(tape, leaves);
    const double base = root.value().item();
    const double again = detail::evaluate(fn, params);
    vpn::detail::require(std::memcmp(&base, &again, sizeof(double)) == 0,
                         "finite_difference_check: function is not deterministic (", base, " vs ", again, ")");
    Gradients grads = backward(tape, root);

    GradCheckReport report;
    report.per_param.assign(params.size(), 0.0);
    std::vector<Tensor> probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor& analytic = grads[leaves[p]];
        std::vector<double> values = params[p].to_vector();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + step;
            probe[p] = Tensor(params[p].shape(), values);
            const double up = detail::evaluate(fn, probe);
            values[i] = orig - step;
            probe[p] = Tensor(params[p].shape(), values);
            const double down = detail::evaluate(fn, probe);
            values[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double err = relative_error(analytic[i], numeric);
            report.per_param[p] = std::max(report.per_param[p], err);
            if (err > report.max_rel_error || report.coordinates == 0) {
                report.max_rel_error = std::max(report.max_rel_error, err);
                report.worst_param = p;
                report.worst_index = i;
                report.worst_analytic = analytic[i];
                report.worst_numeric = numeric;
            }
            ++report.coordinates;
        }
        probe[p] = params[p];
    }
    return report;
}

}  // namespace vpn::diff
