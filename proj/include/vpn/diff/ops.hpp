#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "vpn/diff/tape.hpp"

namespace vpn::diff {

namespace detail {

using vpn::detail::concat;
using vpn::detail::require;

inline Tensor finish(Op op, Shape shape, std::vector<double> values) {
    if (!std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); }))
        throw NonFiniteError(std::string(op_name(op)) + ": non-finite output");
    return Tensor(std::move(shape), std::move(values));
}

inline Tape* tape_of(std::initializer_list<const Var*> inputs) {
    Tape* tape = nullptr;
    for (const Var* v : inputs) {
        if (!v->tape()) continue;
        if (tape && v->tape() != tape) throw Error("inputs live on different tapes");
        tape = v->tape();
    }
    return tape;
}

/// Wraps a computed value: records a node if any input requires grad,
/// otherwise returns a constant.
inline Var emit(Op op, Tensor value, std::initializer_list<const Var*> inputs, BackwardFn backward) {
    Tape* tape = tape_of(inputs);
    if (!tape) return Var(std::move(value));
    std::vector<const Var*> in(inputs);
    return tape->record(op, std::move(value), in, std::move(backward));
}

inline Var emit(Op op, Tensor value, const std::vector<const Var*>& inputs, BackwardFn backward) {
    Tape* tape = nullptr;
    for (const Var* v : inputs) {
        if (!v->tape()) continue;
        if (tape && v->tape() != tape) throw Error("inputs live on different tapes");
        tape = v->tape();
    }
    if (!tape) return Var(std::move(value));
    return tape->record(op, std::move(value), inputs, std::move(backward));
}

inline void same_shape(Op op, const Var& a, const Var& b) {
    require<ShapeError>(a.shape() == b.shape(), op_name(op), ": shape mismatch ", to_string(a.shape()), " vs ",
                        to_string(b.shape()));
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
}

/// Offsets into a tensor of shape b-shape for every element of `out`, where
/// b's axis k is aligned with out's axis `axes[k]` and broadcast elsewhere.
inline std::vector<std::size_t> broadcast_offsets(Op op, const Shape& out, const Shape& b,
                                                  std::span<const std::size_t> axes) {
    require<ShapeError>(axes.size() == b.size(), op_name(op), ": ", axes.size(), " axes declared for operand of shape ",
                        to_string(b));
    std::vector<std::size_t> step(out.size(), 0);
    auto bst = strides_of(b);
    for (std::size_t k = 0; k < axes.size(); ++k) {
        require<ShapeError>(axes[k] < out.size() && out[axes[k]] == b[k], op_name(op), ": operand shape ",
                            to_string(b), " does not match axes of ", to_string(out));
        require<ShapeError>(step[axes[k]] == 0, op_name(op), ": axis ", axes[k], " declared twice");
        step[axes[k]] = bst[k];
    }
    std::vector<std::size_t> offsets(numel(out));
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        offsets[i] = off;
        for (std::size_t d = out.size(); d-- > 0;) {
            if (++idx[d] < out[d]) {
                off += step[d];
                break;
            }
            off -= step[d] * (out[d] - 1);
            idx[d] = 0;
        }
    }
    return offsets;
}

struct ConvGeometry {
    std::size_t n, in[3], ci, k[3], co, out[3], stride[3], pad[3];
};

/// Visits every (output position, kernel tap) pair of one sample that lands
/// inside the input: f(row, column block, input offset). Rows index output
/// positions; column blocks index kernel taps, each ci wide.
template <typename F>
inline void for_each_tap(const ConvGeometry& g, std::size_t n, F&& f) {
    std::size_t row = 0;
    for (std::size_t o0 = 0; o0 < g.out[0]; ++o0)
        for (std::size_t o1 = 0; o1 < g.out[1]; ++o1)
            for (std::size_t o2 = 0; o2 < g.out[2]; ++o2, ++row) {
                std::size_t tap = 0;
                for (std::size_t k0 = 0; k0 < g.k[0]; ++k0) {
                    const auto i0 = static_cast<std::ptrdiff_t>(o0 * g.stride[0] + k0) - static_cast<std::ptrdiff_t>(g.pad[0]);
                    for (std::size_t k1 = 0; k1 < g.k[1]; ++k1) {
                        const auto i1 = static_cast<std::ptrdiff_t>(o1 * g.stride[1] + k1) - static_cast<std::ptrdiff_t>(g.pad[1]);
                        for (std::size_t k2 = 0; k2 < g.k[2]; ++k2, ++tap) {
                            const auto i2 = static_cast<std::ptrdiff_t>(o2 * g.stride[2] + k2) - static_cast<std::ptrdiff_t>(g.pad[2]);
                            if (i0 < 0 || i1 < 0 || i2 < 0 || i0 >= static_cast<std::ptrdiff_t>(g.in[0]) ||
                                i1 >= static_cast<std::ptrdiff_t>(g.in[1]) || i2 >= static_cast<std::ptrdiff_t>(g.in[2]))
                                continue;
                            f(row, tap, (((n * g.in[0] + i0) * g.in[1] + i1) * g.in[2] + i2) * g.ci);
                        }
                    }
                }
            }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Patch matrix [positions, taps·ci] of sample n, zero where the kernel
/// overhangs the padding.
inline RowMatrix im2col(const ConvGeometry& g, const double* x, std::size_t n) {
    const std::size_t taps = g.k[0] * g.k[1] * g.k[2];
    RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(g.out[0] * g.out[1] * g.out[2]),
                                     static_cast<Eigen::Index>(taps * g.ci));
    for_each_tap(g, n, [&](std::size_t row, std::size_t tap, std::size_t off) {
        std::copy(x + off, x + off + g.ci, &cols(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(tap * g.ci)));
    });
    return cols;
}

/// Y = cols·W + b per sample. The patch matrices are kept for the backward
/// pass.
inline std::vector<RowMatrix> conv_forward(const ConvGeometry& g, const double* x, const double* w, const double* b,
                                           double* y) {
    const auto K = static_cast<Eigen::Index>(g.k[0] * g.k[1] * g.k[2] * g.ci);
    const auto P = static_cast<Eigen::Index>(g.out[0] * g.out[1] * g.out[2]);
    const auto Co = static_cast<Eigen::Index>(g.co);
    Eigen::Map<const RowMatrix> W(w, K, Co);
    std::vector<RowMatrix> cols;
    cols.reserve(g.n);
    for (std::size_t n = 0; n < g.n; ++n) {
        Eigen::Map<RowMatrix> Y(y + n * P * Co, P, Co);
        cols.push_back(im2col(g, x, n));
        Y.noalias() = cols.back() * W;
        if (b) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b, Co);
    }
    return cols;
}

inline void conv_backward(const ConvGeometry& g, const std::vector<RowMatrix>& cols, const double* w,
                          const double* gy, double* gx, double* gw, double* gb) {
    const auto K = static_cast<Eigen::Index>(g.k[0] * g.k[1] * g.k[2] * g.ci);
    const auto P = static_cast<Eigen::Index>(g.out[0] * g.out[1] * g.out[2]);
    const auto Co = static_cast<Eigen::Index>(g.co);
    Eigen::Map<const RowMatrix> W(w, K, Co);
    for (std::size_t n = 0; n < g.n; ++n) {
        Eigen::Map<const RowMatrix> GY(gy + n * P * Co, P, Co);
        if (gb) Eigen::Map<Eigen::RowVectorXd>(gb, Co) += GY.colwise().sum();
        if (gw) Eigen::Map<RowMatrix>(gw, K, Co).noalias() += cols[n].transpose() * GY;
        if (gx) {
            const RowMatrix gcols = GY * W.transpose();
            for_each_tap(g, n, [&](std::size_t row, std::size_t tap, std::size_t off) {
                const double* src = &gcols(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(tap * g.ci));
                for (std::size_t c = 0; c < g.ci; ++c) gx[off + c] += src[c];
            });
        }
    }
}

inline std::size_t conv_out(Op op, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    require<ShapeError>(stride > 0, op_name(op), ": stride must be positive");
    require<ShapeError>(in + 2 * pad >= k, op_name(op), ": kernel ", k, " larger than padded input ", in + 2 * pad);
    return (in + 2 * pad - k) / stride + 1;
}

inline Var conv_impl(Op op, const Var& x, const Var& w, const Var* b, ConvGeometry g) {
    Shape out_shape;
    std::vector<double> y(g.n * g.out[0] * g.out[1] * g.out[2] * g.co);
    auto cols = std::make_shared<const std::vector<RowMatrix>>(
        conv_forward(g, x.value().data(), w.value().data(), b ? b->value().data() : nullptr, y.data()));
    if (op == Op::conv3d) out_shape = {g.n, g.out[0], g.out[1], g.out[2], g.co};
    else out_shape = {g.n, g.out[1], g.out[2], g.co};
    Tensor wv = w.value();
    auto fn = [g, cols, wv](BackwardContext& c) {
        conv_backward(g, *cols, wv.data(), c.grad_out.data(), c.in[0], c.in[1], c.in.size() > 2 ? c.in[2] : nullptr);
    };
    Tensor value = finish(op, std::move(out_shape), std::move(y));
    if (b) return emit(op, std::move(value), {&x, &w, b}, fn);
    return emit(op, std::move(value), {&x, &w}, fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [M,K] x [K,N] -> [M,N]
inline Var matmul(const Var& a, const Var& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    vpn::detail::require<ShapeError>(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
                                     "matmul: shape mismatch ", to_string(sa), " x ", to_string(sb));
    const std::size_t M = sa[0], K = sa[1], N = sb[1];
    using detail::RowMatrix;
    const auto m_ = static_cast<Eigen::Index>(M), k_ = static_cast<Eigen::Index>(K), n_ = static_cast<Eigen::Index>(N);
    std::vector<double> y(M * N);
    Eigen::Map<RowMatrix>(y.data(), m_, n_).noalias() =
        Eigen::Map<const RowMatrix>(a.value().data(), m_, k_) * Eigen::Map<const RowMatrix>(b.value().data(), k_, n_);
    Tensor av = a.value(), bv = b.value();
    return detail::emit(Op::matmul, detail::finish(Op::matmul, {M, N}, std::move(y)), {&a, &b},
                        [av, bv, m_, k_, n_](BackwardContext& c) {
                            Eigen::Map<const RowMatrix> G(c.grad_out.data(), m_, n_);
                            if (double* ga = c.in[0])
                                Eigen::Map<RowMatrix>(ga, m_, k_).noalias() +=
                                    G * Eigen::Map<const RowMatrix>(bv.data(), k_, n_).transpose();
                            if (double* gb = c.in[1])
                                Eigen::Map<RowMatrix>(gb, k_, n_).noalias() +=
                                    Eigen::Map<const RowMatrix>(av.data(), m_, k_).transpose() * G;
                        });
}

/// Affine map of rows: x[N,in], w[out,in], optional bias[out] -> x wᵀ + b.
inline Var linear(const Var& x, const Var& w, const Var* bias = nullptr) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    vpn::detail::require<ShapeError>(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1], "linear: shape mismatch ",
                                     to_string(sx), " with weight ", to_string(sw));
    const std::size_t N = sx[0], I = sx[1], O = sw[0];
    if (bias)
        vpn::detail::require<ShapeError>(bias->shape() == Shape{O}, "linear: bias shape ", to_string(bias->shape()),
                                         " does not match ", O, " outputs");
    using detail::RowMatrix;
    const auto n_ = static_cast<Eigen::Index>(N), i_ = static_cast<Eigen::Index>(I), o_ = static_cast<Eigen::Index>(O);
    std::vector<double> y(N * O);
    Eigen::Map<RowMatrix> Y(y.data(), n_, o_);
    Y.noalias() = Eigen::Map<const RowMatrix>(x.value().data(), n_, i_) *
                  Eigen::Map<const RowMatrix>(w.value().data(), o_, i_).transpose();
    if (bias) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value().data(), o_);
    Tensor xv = x.value(), wv = w.value();
    auto fn = [xv, wv, n_, i_, o_](BackwardContext& c) {
        Eigen::Map<const RowMatrix> G(c.grad_out.data(), n_, o_);
        if (double* gx = c.in[0])
            Eigen::Map<RowMatrix>(gx, n_, i_).noalias() += G * Eigen::Map<const RowMatrix>(wv.data(), o_, i_);
        if (double* gw = c.in[1])
            Eigen::Map<RowMatrix>(gw, o_, i_).noalias() += G.transpose() * Eigen::Map<const RowMatrix>(xv.data(), n_, i_);
        if (c.in.size() > 2 && c.in[2]) Eigen::Map<Eigen::RowVectorXd>(c.in[2], o_) += G.colwise().sum();
    };
    Tensor value = detail::finish(Op::linear, {N, O}, std::move(y));
    if (bias) return detail::emit(Op::linear, std::move(value), {&x, &w, bias}, fn);
    return detail::emit(Op::linear, std::move(value), {&x, &w}, fn);
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
    detail::same_shape(Op::add, a, b);
    std::vector<double> y(a.value().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
    return detail::emit(Op::add, detail::finish(Op::add, a.shape(), std::move(y)), {&a, &b},
                        [](BackwardContext& c) {
                            for (int k = 0; k < 2; ++k)
                                if (double* g = c.in[k])
                                    for (std::size_t i = 0; i < c.grad_out.size(); ++i) g[i] += c.grad_out[i];
                        });
}

inline Var sub(const Var& a, const Var& b) {
    detail::same_shape(Op::sub, a, b);
    std::vector<double> y(a.value().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
    return detail::emit(Op::sub, detail::finish(Op::sub, a.shape(), std::move(y)), {&a, &b},
                        [](BackwardContext& c) {
                            if (double* g = c.in[0])
                                for (std::size_t i = 0; i < c.grad_out.size(); ++i) g[i] += c.grad_out[i];
                            if (double* g = c.in[1])
                                for (std::size_t i = 0; i < c.grad_out.size(); ++i) g[i] -= c.grad_out[i];
                        });
}

/// Multiplication by a constant scalar.
inline Var scale(const Var& a, double s) {
    std::vector<double> y(a.value().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = s * a.value()[i];
    return detail::emit(Op::scale, detail::finish(Op::scale, a.shape(), std::move(y)), {&a},
                        [s](BackwardContext& c) {
                            for (std::size_t i = 0; i < c.grad_out.size(); ++i) c.in[0][i] += s * c.grad_out[i];
                        });
}

inline Var elementwise_mul(const Var& a, const Var& b) {
    detail::same_shape(Op::elementwise_mul, a, b);
    std::vector<double> y(a.value().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    Tensor av = a.value(), bv = b.value();
    return detail::emit(Op::elementwise_mul, detail::finish(Op::elementwise_mul, a.shape(), std::move(y)), {&a, &b},
                        [av, bv](BackwardContext& c) {
                            if (double* g = c.in[0])
                                for (std::size_t i = 0; i < c.grad_out.size(); ++i) g[i] += c.grad_out[i] * bv[i];
                            if (double* g = c.in[1])
                                for (std::size_t i = 0; i < c.grad_out.size(); ++i) g[i] += c.grad_out[i] * av[i];
                        });
}

namespace detail {
template <typename F, typename D>
Var unary(Op op, const Var& a, F f, D dydx_from_xy) {
    std::vector<double> y(a.value().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(a.value()[i]);
    Tensor value = finish(op, a.shape(), std::move(y));
    Tensor xv = a.value(), yv = value;
    return emit(op, std::move(value), {&a}, [xv, yv, dydx_from_xy](BackwardContext& c) {
        for (std::size_t i = 0; i < c.grad_out.size(); ++i) c.in[0][i] += c.grad_out[i] * dydx_from_xy(xv[i], yv[i]);
    });
}
}  // namespace detail

inline Var tanh(const Var& a) {
    return detail::unary(
        Op::tanh, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        Op::sigmoid, a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(const Var& a) {
    return detail::unary(
        Op::relu, a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var log(const Var& a) {
    return detail::unary(
        Op::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// max(x, floor); the gradient passes where x >= floor.
inline Var clamp_min(const Var& a, double floor) {
    return detail::unary(
        Op::clamp_min, a, [floor](double x) { return x >= floor ? x : floor; },
        [floor](double x, double) { return x >= floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

inline Var softmax_lastdim(const Var& a) {
    const auto& s = a.shape();
    vpn::detail::require<ShapeError>(!s.empty() && s.back() > 0, "softmax_lastdim: needs a non-empty last axis, got ",
                                     to_string(s));
    const std::size_t L = s.back(), rows = a.value().size() / L;
    std::vector<double> y(a.value().size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.value().data() + r * L;
        double* yr = y.data() + r * L;
        const double mx = *std::max_element(x, x + L);
        double z = 0.0;
        for (std::size_t i = 0; i < L; ++i) z += (yr[i] = std::exp(x[i] - mx));
        for (std::size_t i = 0; i < L; ++i) yr[i] /= z;
    }
    Tensor value = detail::finish(Op::softmax_lastdim, s, std::move(y));
    Tensor yv = value;
    return detail::emit(Op::softmax_lastdim, std::move(value), {&a}, [yv, L, rows](BackwardContext& c) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = yv.data() + r * L;
            const double* g = c.grad_out.data() + r * L;
            double dot = 0.0;
            for (std::size_t i = 0; i < L; ++i) dot += g[i] * yr[i];
            for (std::size_t i = 0; i < L; ++i) c.in[0][r * L + i] += yr[i] * (g[i] - dot);
        }
    });
}

namespace detail {
inline Var reduce_axis(Op op, const Var& a, std::size_t axis, double factor) {
    const auto& s = a.shape();
    require<ShapeError>(axis < s.size(), op_name(op), ": axis ", axis, " out of range for ", to_string(s));
    auto [outer, extent, inner] = split_axis(s, axis);
    Shape os = s;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> y(outer * inner, 0.0);
    const double* x = a.value().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x[(o * extent + e) * inner + i];
    if (factor != 1.0)
        for (auto& v : y) v *= factor;
    return emit(op, finish(op, std::move(os), std::move(y)), {&a},
                [outer = outer, extent = extent, inner = inner, factor](BackwardContext& c) {
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t e = 0; e < extent; ++e)
                            for (std::size_t i = 0; i < inner; ++i)
                                c.in[0][(o * extent + e) * inner + i] += factor * c.grad_out[o * inner + i];
                });
}
}  // namespace detail

inline Var sum_axis(const Var& a, std::size_t axis) { return detail::reduce_axis(Op::sum_axis, a, axis, 1.0); }

inline Var mean_axis(const Var& a, std::size_t axis) {
    vpn::detail::require<ShapeError>(axis < a.shape().size(), "mean_axis: axis ", axis, " out of range for ",
                                     to_string(a.shape()));
    return detail::reduce_axis(Op::mean_axis, a, axis, 1.0 / static_cast<double>(a.shape()[axis]));
}

/// Sum of every element; returns a scalar.
inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::size_t n = a.value().size();
    return detail::emit(Op::sum_all, detail::finish(Op::sum_all, {}, {s}), {&a}, [n](BackwardContext& c) {
        for (std::size_t i = 0; i < n; ++i) c.in[0][i] += c.grad_out[0];
    });
}

/// Unit-normalization along the last axis: x / sqrt(sum x^2 + eps).
inline Var l2_normalize_eps(const Var& a, double eps) {
    vpn::detail::require(eps > 0, "l2_normalize_eps: eps must be positive");
    const auto& s = a.shape();
    vpn::detail::require<ShapeError>(!s.empty(), "l2_normalize_eps: needs at least one axis");
    const std::size_t L = s.back(), rows = a.value().size() / L;
    std::vector<double> y(a.value().size());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.value().data() + r * L;
        double ss = 0.0;
        for (std::size_t i = 0; i < L; ++i) ss += x[i] * x[i];
        norms[r] = std::sqrt(ss + eps);
        for (std::size_t i = 0; i < L; ++i) y[r * L + i] = x[i] / norms[r];
    }
    Tensor xv = a.value();
    return detail::emit(Op::l2_normalize_eps, detail::finish(Op::l2_normalize_eps, s, std::move(y)), {&a},
                        [xv, norms, L, rows](BackwardContext& c) {
                            for (std::size_t r = 0; r < rows; ++r) {
                                const double* x = xv.data() + r * L;
                                const double* g = c.grad_out.data() + r * L;
                                const double n = norms[r];
                                double dot = 0.0;
                                for (std::size_t i = 0; i < L; ++i) dot += g[i] * x[i];
                                const double k = dot / (n * n * n);
                                for (std::size_t i = 0; i < L; ++i) c.in[0][r * L + i] += g[i] / n - x[i] * k;
                            }
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
    vpn::detail::require<ShapeError>(numel(shape) == a.value().size(), "reshape: cannot view ", to_string(a.shape()),
                                     " as ", to_string(shape));
    return detail::emit(Op::reshape, a.value().reshaped(std::move(shape)), {&a}, [](BackwardContext& c) {
        for (std::size_t i = 0; i < c.grad_out.size(); ++i) c.in[0][i] += c.grad_out[i];
    });
}

/// Output axis i is input axis perm[i].
inline Var permute(const Var& a, std::vector<std::size_t> perm) {
    const auto& s = a.shape();
    vpn::detail::require<ShapeError>(perm.size() == s.size(), "permute: permutation of length ", perm.size(),
                                     " for shape ", to_string(s));
    std::vector<bool> seen(s.size(), false);
    Shape os(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        vpn::detail::require<ShapeError>(perm[i] < s.size() && !seen[perm[i]], "permute: invalid permutation");
        seen[perm[i]] = true;
        os[i] = s[perm[i]];
    }
    std::vector<std::size_t> axes(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) axes[i] = perm[i];
    // Output element with multi-index j reads input at index with i[perm[k]] = j[k];
    // computed as a broadcast map from the output shape onto the input.
    std::vector<std::size_t> src_axes(s.size());
    for (std::size_t k = 0; k < perm.size(); ++k) src_axes[perm[k]] = k;
    auto offsets = detail::broadcast_offsets(Op::permute, os, s, src_axes);
    std::vector<double> y(offsets.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[offsets[i]];
    return detail::emit(Op::permute, detail::finish(Op::permute, std::move(os), std::move(y)), {&a},
                        [offsets](BackwardContext& c) {
                            for (std::size_t i = 0; i < offsets.size(); ++i) c.in[0][offsets[i]] += c.grad_out[i];
                        });
}

/// Elements [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& s = a.shape();
    vpn::detail::require<ShapeError>(axis < s.size() && begin < end && end <= s[axis], "slice: range [", begin, ",",
                                     end, ") on axis ", axis, " invalid for ", to_string(s));
    auto [outer, extent, inner] = detail::split_axis(s, axis);
    const std::size_t len = end - begin;
    Shape os = s;
    os[axis] = len;
    std::vector<double> y(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.value().data() + (o * extent + begin) * inner, len * inner, y.data() + o * len * inner);
    return detail::emit(Op::slice, detail::finish(Op::slice, std::move(os), std::move(y)), {&a},
                        [outer = outer, extent = extent, inner = inner, begin, len](BackwardContext& c) {
                            for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < len * inner; ++i)
                                    c.in[0][(o * extent + begin) * inner + i] += c.grad_out[o * len * inner + i];
                        });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    vpn::detail::require<ShapeError>(!parts.empty(), "concat: no inputs");
    Shape os = parts[0].shape();
    vpn::detail::require<ShapeError>(axis < os.size(), "concat: axis ", axis, " out of range for ", to_string(os));
    os[axis] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        vpn::detail::require<ShapeError>(s.size() == os.size(), "concat: rank mismatch ", to_string(s));
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis)
                vpn::detail::require<ShapeError>(s[d] == parts[0].shape()[d], "concat: shape mismatch ",
                                                 to_string(parts[0].shape()), " vs ", to_string(s));
        os[axis] += s[axis];
    }
    auto [outer, total, inner] = detail::split_axis(os, axis);
    std::vector<double> y(numel(os));
    std::vector<std::size_t> starts;
    std::size_t at = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[axis];
        starts.push_back(at);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.value().data() + o * len * inner, len * inner, y.data() + (o * total + at) * inner);
        at += len;
    }
    std::vector<std::size_t> lens;
    std::vector<const Var*> in;
    for (const auto& p : parts) {
        lens.push_back(p.shape()[axis]);
        in.push_back(&p);
    }
    return detail::emit(Op::concat, detail::finish(Op::concat, std::move(os), std::move(y)), in,
                        [outer = outer, total = total, inner = inner, starts, lens](BackwardContext& c) {
                            for (std::size_t k = 0; k < lens.size(); ++k) {
                                double* g = c.in[k];
                                if (!g) continue;
                                for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < lens[k] * inner; ++i)
                                        g[o * lens[k] * inner + i] += c.grad_out[(o * total + starts[k]) * inner + i];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Explicit broadcasting. Operand b's axis k is aligned with a's axis axes[k];
// every other axis of a is a broadcast axis for b.

inline Var broadcast_mul(const Var& a, const Var& b, std::vector<std::size_t> axes) {
    auto offsets = detail::broadcast_offsets(Op::broadcast_mul, a.shape(), b.shape(), axes);
    std::vector<double> y(offsets.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[offsets[i]];
    Tensor av = a.value(), bv = b.value();
    return detail::emit(Op::broadcast_mul, detail::finish(Op::broadcast_mul, a.shape(), std::move(y)), {&a, &b},
                        [av, bv, offsets](BackwardContext& c) {
                            if (double* ga = c.in[0])
                                for (std::size_t i = 0; i < offsets.size(); ++i) ga[i] += c.grad_out[i] * bv[offsets[i]];
                            if (double* gb = c.in[1])
                                for (std::size_t i = 0; i < offsets.size(); ++i) gb[offsets[i]] += c.grad_out[i] * av[i];
                        });
}

inline Var broadcast_add(const Var& a, const Var& b, std::vector<std::size_t> axes) {
    auto offsets = detail::broadcast_offsets(Op::broadcast_add, a.shape(), b.shape(), axes);
    std::vector<double> y(offsets.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[offsets[i]];
    return detail::emit(Op::broadcast_add, detail::finish(Op::broadcast_add, a.shape(), std::move(y)), {&a, &b},
                        [offsets](BackwardContext& c) {
                            if (double* ga = c.in[0])
                                for (std::size_t i = 0; i < offsets.size(); ++i) ga[i] += c.grad_out[i];
                            if (double* gb = c.in[1])
                                for (std::size_t i = 0; i < offsets.size(); ++i) gb[offsets[i]] += c.grad_out[i];
                        });
}

/// Duplicates `b` along the axes of `shape` it does not occupy.
inline Var inflate(const Var& b, Shape shape, std::vector<std::size_t> axes) {
    auto offsets = detail::broadcast_offsets(Op::inflate, shape, b.shape(), axes);
    std::vector<double> y(offsets.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = b.value()[offsets[i]];
    return detail::emit(Op::inflate, detail::finish(Op::inflate, std::move(shape), std::move(y)), {&b},
                        [offsets](BackwardContext& c) {
                            for (std::size_t i = 0; i < offsets.size(); ++i) c.in[0][offsets[i]] += c.grad_out[i];
                        });
}

// ---------------------------------------------------------------------------
// Convolution and pooling, channels-last.

/// x[N,H,W,Ci], w[kh,kw,Ci,Co], optional bias[Co].
inline Var conv2d(const Var& x, const Var& w, const Var* bias, std::array<std::size_t, 2> stride,
                  std::array<std::size_t, 2> pad) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    vpn::detail::require<ShapeError>(sx.size() == 4 && sw.size() == 4 && sx[3] == sw[2], "conv2d: shape mismatch ",
                                     to_string(sx), " with kernel ", to_string(sw));
    if (bias)
        vpn::detail::require<ShapeError>(bias->shape() == Shape{sw[3]}, "conv2d: bias shape ",
                                         to_string(bias->shape()), " for ", sw[3], " output channels");
    detail::ConvGeometry g{sx[0], {1, sx[1], sx[2]}, sx[3], {1, sw[0], sw[1]}, sw[3], {1, 0, 0},
                           {1, stride[0], stride[1]}, {0, pad[0], pad[1]}};
    g.out[1] = detail::conv_out(Op::conv2d, sx[1], sw[0], stride[0], pad[0]);
    g.out[2] = detail::conv_out(Op::conv2d, sx[2], sw[1], stride[1], pad[1]);
    return detail::conv_impl(Op::conv2d, x, w, bias, g);
}

/// x[N,T,H,W,Ci], w[kt,kh,kw,Ci,Co], optional bias[Co].
inline Var conv3d(const Var& x, const Var& w, const Var* bias, std::array<std::size_t, 3> stride,
                  std::array<std::size_t, 3> pad) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    vpn::detail::require<ShapeError>(sx.size() == 5 && sw.size() == 5 && sx[4] == sw[3], "conv3d: shape mismatch ",
                                     to_string(sx), " with kernel ", to_string(sw));
    if (bias)
        vpn::detail::require<ShapeError>(bias->shape() == Shape{sw[4]}, "conv3d: bias shape ",
                                         to_string(bias->shape()), " for ", sw[4], " output channels");
    detail::ConvGeometry g{sx[0], {sx[1], sx[2], sx[3]}, sx[4], {sw[0], sw[1], sw[2]}, sw[4], {0, 0, 0},
                           {stride[0], stride[1], stride[2]}, {pad[0], pad[1], pad[2]}};
    for (int d = 0; d < 3; ++d) g.out[d] = detail::conv_out(Op::conv3d, sx[1 + d], sw[d], stride[d], pad[d]);
    return detail::conv_impl(Op::conv3d, x, w, bias, g);
}

/// Non-overlapping average pooling over (T,H,W) of x[N,T,H,W,C]; trailing
/// remainders are dropped.
inline Var avg_pool3d(const Var& x, std::array<std::size_t, 3> window) {
    const auto& s = x.shape();
    vpn::detail::require<ShapeError>(s.size() == 5, "avg_pool3d: expects [N,T,H,W,C], got ", to_string(s));
    for (int d = 0; d < 3; ++d)
        vpn::detail::require<ShapeError>(window[d] > 0 && s[1 + d] >= window[d], "avg_pool3d: window larger than input ",
                                         to_string(s));
    const std::size_t N = s[0], C = s[4];
    const std::size_t in[3] = {s[1], s[2], s[3]};
    const std::size_t out[3] = {s[1] / window[0], s[2] / window[1], s[3] / window[2]};
    const double inv = 1.0 / static_cast<double>(window[0] * window[1] * window[2]);
    Shape os{N, out[0], out[1], out[2], C};
    std::vector<double> y(numel(os), 0.0);
    auto visit = [=](auto&& f) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t a = 0; a < out[0]; ++a)
                for (std::size_t b = 0; b < out[1]; ++b)
                    for (std::size_t d = 0; d < out[2]; ++d) {
                        const std::size_t oo = (((n * out[0] + a) * out[1] + b) * out[2] + d) * C;
                        for (std::size_t p = 0; p < window[0]; ++p)
                            for (std::size_t q = 0; q < window[1]; ++q)
                                for (std::size_t r = 0; r < window[2]; ++r) {
                                    const std::size_t io =
                                        (((n * in[0] + a * window[0] + p) * in[1] + b * window[1] + q) * in[2] +
                                         d * window[2] + r) *
                                        C;
                                    f(oo, io);
                                }
                    }
    };
    const double* xv = x.value().data();
    visit([&](std::size_t oo, std::size_t io) {
        for (std::size_t c = 0; c < C; ++c) y[oo + c] += xv[io + c] * inv;
    });
    return detail::emit(Op::avg_pool3d, detail::finish(Op::avg_pool3d, std::move(os), std::move(y)), {&x},
                        [visit, C, inv](BackwardContext& c) {
                            visit([&](std::size_t oo, std::size_t io) {
                                for (std::size_t k = 0; k < C; ++k) c.in[0][io + k] += c.grad_out[oo + k] * inv;
                            });
                        });
}

// ---------------------------------------------------------------------------
// Normalization, regularization, indexing

struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;
};

/// Batch normalization over every axis but the last (channels).
///
/// In training mode statistics come from the batch and are written to
/// `batch_stats` if given; otherwise the supplied running statistics are
/// used as constants.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps, bool training,
                      const BatchStats* running = nullptr, BatchStats* batch_stats = nullptr) {
    const auto& s = x.shape();
    vpn::detail::require<ShapeError>(!s.empty(), "batch_norm: needs a channel axis");
    const std::size_t C = s.back(), M = x.value().size() / C;
    vpn::detail::require<ShapeError>(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
                                     "batch_norm: affine parameters must have shape [", C, "]");
    std::vector<double> mean(C, 0.0), var(C, 0.0);
    const double* xv = x.value().data();
    if (training) {
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t c = 0; c < C; ++c) mean[c] += xv[m * C + c];
        for (auto& v : mean) v /= static_cast<double>(M);
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t c = 0; c < C; ++c) {
                const double d = xv[m * C + c] - mean[c];
                var[c] += d * d;
            }
        for (auto& v : var) v /= static_cast<double>(M);
        if (batch_stats) *batch_stats = BatchStats{mean, var};
    } else {
        vpn::detail::require(running && running->mean.size() == C && running->var.size() == C,
                             "batch_norm: evaluation mode needs running statistics of size ", C);
        mean = running->mean;
        var = running->var;
    }
    std::vector<double> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    std::vector<double> xhat(x.value().size()), y(x.value().size());
    const double* gm = gamma.value().data();
    const double* bt = beta.value().data();
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = m * C + c;
            xhat[i] = (xv[i] - mean[c]) * inv_std[c];
            y[i] = gm[c] * xhat[i] + bt[c];
        }
    Tensor gv = gamma.value();
    return detail::emit(
        Op::batch_norm, detail::finish(Op::batch_norm, s, std::move(y)), {&x, &gamma, &beta},
        [xhat = std::move(xhat), inv_std, gv, C, M, training](BackwardContext& c) {
            const double* g = c.grad_out.data();
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (std::size_t m = 0; m < M; ++m)
                for (std::size_t k = 0; k < C; ++k) {
                    sum_g[k] += g[m * C + k];
                    sum_gx[k] += g[m * C + k] * xhat[m * C + k];
                }
            if (c.in[1])
                for (std::size_t k = 0; k < C; ++k) c.in[1][k] += sum_gx[k];
            if (c.in[2])
                for (std::size_t k = 0; k < C; ++k) c.in[2][k] += sum_g[k];
            if (double* gx = c.in[0]) {
                const double inv_m = 1.0 / static_cast<double>(M);
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t k = 0; k < C; ++k) {
                        const std::size_t i = m * C + k;
                        const double scale = gv[k] * inv_std[k];
                        if (training)
                            gx[i] += scale * (g[i] - inv_m * sum_g[k] - xhat[i] * inv_m * sum_gx[k]);
                        else
                            gx[i] += scale * g[i];
                    }
            }
        });
}

/// Uniform double in [0,1) from the top 53 bits of a 64-bit draw.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity when `rng` is null (inference) or rate is 0.
inline Var dropout(const Var& x, double rate, std::mt19937_64* rng) {
    vpn::detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got ", rate);
    if (!rng || rate == 0.0) return x;
    const double keep = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.value().size());
    for (auto& m : mask) m = uniform01(*rng) >= rate ? keep : 0.0;
    std::vector<double> y(mask.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * mask[i];
    return detail::emit(Op::dropout, detail::finish(Op::dropout, x.shape(), std::move(y)), {&x},
                        [mask](BackwardContext& c) {
                            for (std::size_t i = 0; i < mask.size(); ++i) c.in[0][i] += c.grad_out[i] * mask[i];
                        });
}

/// x[N,C], one index per row -> [N].
inline Var pick(const Var& x, const std::vector<std::size_t>& index) {
    const auto& s = x.shape();
    vpn::detail::require<ShapeError>(s.size() == 2 && index.size() == s[0], "pick: ", index.size(),
                                     " indices for shape ", to_string(s));
    const std::size_t C = s[1];
    std::vector<double> y(index.size());
    for (std::size_t n = 0; n < index.size(); ++n) {
        vpn::detail::require<ShapeError>(index[n] < C, "pick: index ", index[n], " out of range ", C);
        y[n] = x.value()[n * C + index[n]];
    }
    return detail::emit(Op::pick, detail::finish(Op::pick, {index.size()}, std::move(y)), {&x},
                        [index, C](BackwardContext& c) {
                            for (std::size_t n = 0; n < index.size(); ++n) c.in[0][n * C + index[n]] += c.grad_out[n];
                        });
}

}  // namespace vpn::diff
