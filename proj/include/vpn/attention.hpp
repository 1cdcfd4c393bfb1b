#pragma once

#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "vpn/params.hpp"

namespace vpn {

struct AttentionGeometry {
    std::size_t t_c = 4;
    std::size_t m = 7;
    std::size_t n = 7;
    std::size_t cells() const { return m * n; }
};

/// z1 (spatial, m·n per sample) and z2 (temporal, t_c per sample).
struct LatentAttentionVectors {
    Var z1;  ///< [N, m·n]
    Var z2;  ///< [N, t_c]
};

struct CoupledAttention {
    Var A_S;   ///< [N, m, n]
    Var A_T;   ///< [N, t_c]
    Var A_ST;  ///< [N, m, n, t_c]
};

/// Two independent tanh trunks, one per latent vector.
inline void init_attention(ParameterSet& params, std::size_t D_p, std::size_t d_a, const AttentionGeometry& g,
                           std::uint64_t seed) {
    const std::size_t out[2] = {g.cells(), g.t_c};
    for (int r = 1; r <= 2; ++r) {
        const std::string s = std::to_string(r);
        const std::size_t o = out[r - 1];
        params.add("att.W_h" + s, glorot_uniform({d_a, D_p}, D_p, d_a, seed, "att.W_h" + s));
        params.add("att.b_h" + s, Tensor::zeros({d_a}));
        params.add("att.W_z" + s, glorot_uniform({o, d_a}, d_a, o, seed, "att.W_z" + s));
        params.add("att.b_z" + s, Tensor::zeros({o}));
    }
}

/// z_r = W_z_r tanh(W_h_r h* + b_h_r) + b_z_r for h* of shape [N, D_p].
inline LatentAttentionVectors latent_vectors(Binding& bind, const Var& h) {
    auto head = [&](const std::string& r) {
        Var hidden = diff::tanh(diff::linear(h, bind("att.W_h" + r), &bind("att.b_h" + r)));
        return diff::linear(hidden, bind("att.W_z" + r), &bind("att.b_z" + r));
    };
    return {head("1"), head("2")};
}

/// A_S = sigmoid(z1) as [N, m, n]; A_T = softmax(z2).
inline std::pair<Var, Var> attention_weights(const LatentAttentionVectors& z, const AttentionGeometry& g) {
    const auto& s1 = z.z1.shape();
    const auto& s2 = z.z2.shape();
    detail::require<ShapeError>(s1.size() == 2 && s1[1] == g.cells(), "attention_weights: z1 has shape ",
                                diff::to_string(s1), ", expected [N,", g.cells(), "]");
    detail::require<ShapeError>(s2.size() == 2 && s2[1] == g.t_c && s2[0] == s1[0], "attention_weights: z2 has shape ",
                                diff::to_string(s2), ", expected [", s1[0], ",", g.t_c, "]");
    Var A_S = diff::reshape(diff::sigmoid(z.z1), {s1[0], g.m, g.n});
    return {A_S, diff::softmax_lastdim(z.z2)};
}

/// A_ST[i,j,t] = A_S[i,j] · A_T[t], by inflating both to [N, m, n, t_c].
inline Var couple(const Var& A_S, const Var& A_T) {
    const auto& s = A_S.shape();
    const auto& t = A_T.shape();
    detail::require<ShapeError>(s.size() == 3 && t.size() == 2 && s[0] == t[0], "couple: A_S ", diff::to_string(s),
                                " and A_T ", diff::to_string(t), " are incompatible");
    const Shape full{s[0], s[1], s[2], t[1]};
    return diff::elementwise_mul(diff::inflate(A_S, full, {0, 1, 2}), diff::inflate(A_T, full, {0, 3}));
}

inline CoupledAttention coupled_attention(const LatentAttentionVectors& z, const AttentionGeometry& g) {
    auto [A_S, A_T] = attention_weights(z, g);
    Var A_ST = couple(A_S, A_T);
    return {A_S, A_T, A_ST};
}

namespace detail {
inline void check_map(const char* op, const Var& f, std::size_t N, std::size_t t_c, std::size_t m, std::size_t n) {
    const auto& s = f.shape();
    require<ShapeError>(s.size() == 5 && s[0] == N && s[1] == t_c && s[2] == m && s[3] == n, op, ": feature map ",
                        diff::to_string(s), " does not match attention extents [", N, ",", t_c, ",", m, ",", n,
                        ",c]");
}
}  // namespace detail

/// f′ = A_ST ⊙ f + f, with f of shape [N, t_c, m, n, c] and one weight per
/// space-time cell shared across channels.
inline Var modulate(const Var& f, const Var& A_ST) {
    const auto& a = A_ST.shape();
    detail::require<ShapeError>(a.size() == 4, "modulate: A_ST must be [N,m,n,t_c], got ", diff::to_string(a));
    detail::check_map("modulate", f, a[0], a[3], a[1], a[2]);
    return diff::add(diff::broadcast_mul(f, A_ST, {0, 2, 3, 1}), f);
}

/// Two-stream baseline without the coupler: [f(1 + A_S) ‖ f(1 + A_T)] along channels.
inline Var dissociated_modulate(const Var& f, const Var& A_S, const Var& A_T) {
    const auto& s = A_S.shape();
    const auto& t = A_T.shape();
    detail::require<ShapeError>(s.size() == 3 && t.size() == 2, "dissociated_modulate: A_S ", diff::to_string(s),
                                " and A_T ", diff::to_string(t), " have the wrong rank");
    detail::check_map("dissociated_modulate", f, s[0], t[1], s[1], s[2]);
    Var spatial = diff::add(diff::broadcast_mul(f, A_S, {0, 2, 3}), f);
    Var temporal = diff::add(diff::broadcast_mul(f, A_T, {0, 1}), f);
    return diff::concat({spatial, temporal}, 4);
}

/// Row-stochastic matrix mapping `from` samples onto `to` with align-corners
/// bilinear weights; the identity when the sizes agree.
inline Tensor interpolation_matrix(std::size_t to, std::size_t from) {
    detail::require(to > 0 && from > 0, "interpolation_matrix: empty extent");
    std::vector<double> w(to * from, 0.0);
    if (to == from) return Tensor::identity(to);
    for (std::size_t i = 0; i < to; ++i) {
        const double pos = to == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(from - 1) /
                                               static_cast<double>(to - 1);
        std::size_t lo = static_cast<std::size_t>(pos);
        if (lo >= from - 1) {
            w[i * from + from - 1] = 1.0;
            continue;
        }
        const double frac = pos - static_cast<double>(lo);
        w[i * from + lo] = 1.0 - frac;
        w[i * from + lo + 1] += frac;
    }
    return Tensor({to, from}, std::move(w));
}

/// Bilinear resize of A_S [N, m, n] to [N, rows, cols].
inline Var resize_spatial(const Var& A_S, std::size_t rows, std::size_t cols) {
    const auto& s = A_S.shape();
    detail::require<ShapeError>(s.size() == 3, "resize_spatial: expects [N,m,n], got ", diff::to_string(s));
    if (s[1] == rows && s[2] == cols) return A_S;
    const std::size_t N = s[0], m = s[1], n = s[2];
    Var R(interpolation_matrix(rows, m));
    Var Ct_T = diff::permute(Var(interpolation_matrix(cols, n)), {1, 0});
    // Rows: R · A for each sample, via [m, N·n] layout.
    Var by_row = diff::reshape(diff::permute(A_S, {1, 0, 2}), {m, N * n});
    Var mixed = diff::permute(diff::reshape(diff::matmul(R, by_row), {rows, N, n}), {1, 0, 2});
    // Columns: (·) Cᵀ on the trailing axis.
    Var flat = diff::reshape(mixed, {N * rows, n});
    return diff::reshape(diff::matmul(flat, Ct_T), {N, rows, cols});
}

/// Long-format CSV: id, tensor, i, j, t, value. Empty index fields are not
/// applicable to that tensor.
inline void write_attention_csv(std::ostream& out, const std::vector<std::string>& ids, const CoupledAttention& att,
                                bool header = true) {
    const auto& s = att.A_S.shape();
    const std::size_t N = s[0], m = s[1], n = s[2], T = att.A_T.shape()[1];
    detail::require(ids.size() == N, "write_attention_csv: ", ids.size(), " ids for ", N, " samples");
    if (header) out << "id,tensor,i,j,t,value\n";
    out << std::setprecision(17);
    for (std::size_t b = 0; b < N; ++b) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out << ids[b] << ",A_S," << i << ',' << j << ",," << att.A_S.value()[(b * m + i) * n + j] << '\n';
        for (std::size_t t = 0; t < T; ++t) out << ids[b] << ",A_T,,," << t << ',' << att.A_T.value()[b * T + t] << '\n';
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t t = 0; t < T; ++t)
                    out << ids[b] << ",A_ST," << i << ',' << j << ',' << t << ','
                        << att.A_ST.value()[((b * m + i) * n + j) * T + t] << '\n';
    }
}

}  // namespace vpn
