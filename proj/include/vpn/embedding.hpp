#pragma once

#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "vpn/params.hpp"

namespace vpn {

enum class EmbeddingLossKind { ne, kl_fp, kl_pf, kl_bi };

inline const char* to_string(EmbeddingLossKind k) {
    switch (k) {
        case EmbeddingLossKind::ne: return "ne";
        case EmbeddingLossKind::kl_fp: return "kl_fp";
        case EmbeddingLossKind::kl_pf: return "kl_pf";
        case EmbeddingLossKind::kl_bi: return "kl_bi";
    }
    return "?";
}

inline EmbeddingLossKind parse_embedding_loss(const std::string& s) {
    for (auto k : {EmbeddingLossKind::ne, EmbeddingLossKind::kl_fp, EmbeddingLossKind::kl_pf, EmbeddingLossKind::kl_bi})
        if (s == to_string(k)) return k;
    throw Error("unknown embedding loss '" + s + "' (expected ne, kl_fp, kl_pf or kl_bi)");
}

struct EmbeddedPair {
    Var f_e;      ///< [N, D_e]
    Var P_e;      ///< [N, D_e]
    Var f_e_hat;  ///< [N, D_e]
    Var P_e_hat;  ///< [N, D_e]
};

/// Sum over time of f [N, t_c, m, n, c], flattened to [N, m·n·c].
inline Var spatial_pool(const Var& f) {
    const auto& s = f.shape();
    detail::require<ShapeError>(s.size() == 5, "spatial_pool: expects [N,t_c,m,n,c], got ", diff::to_string(s));
    return diff::reshape(diff::sum_axis(f, 1), {s[0], s[2] * s[3] * s[4]});
}

inline Var hypersphere_normalize(const Var& v, double eps) { return diff::l2_normalize_eps(v, eps); }

/// Divides a matrix by its Frobenius norm.
inline Tensor enforce_norm_constraint(const Tensor& T) {
    double ss = 0.0;
    for (double v : T.values()) ss += v * v;
    detail::require(ss > 0.0, "cannot normalize a zero projection matrix");
    const double inv = 1.0 / std::sqrt(ss);
    std::vector<double> out(T.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T[i] * inv;
    return Tensor(T.shape(), std::move(out));
}

inline double frobenius_norm(const Tensor& T) {
    double ss = 0.0;
    for (double v : T.values()) ss += v * v;
    return std::sqrt(ss);
}

inline const std::vector<std::string>& projection_names() {
    static const std::vector<std::string> names{"emb.T_v", "emb.T_p"};
    return names;
}

inline void init_embedding(ParameterSet& params, std::size_t D_v, std::size_t D_z, std::size_t D_e,
                           std::uint64_t seed) {
    params.add("emb.T_v", enforce_norm_constraint(glorot_uniform({D_e, D_v}, D_v, D_e, seed, "emb.T_v")));
    params.add("emb.T_p", enforce_norm_constraint(glorot_uniform({D_e, D_z}, D_z, D_e, seed, "emb.T_p")));
}

/// f_e = T_v f_s and P_e = T_p z1 row-wise, with their unit-sphere images.
inline EmbeddedPair project(Binding& bind, const Var& f_s, const Var& z1, double eps) {
    Var f_e = diff::linear(f_s, bind("emb.T_v"));
    Var P_e = diff::linear(z1, bind("emb.T_p"));
    return {f_e, P_e, hypersphere_normalize(f_e, eps), hypersphere_normalize(P_e, eps)};
}

/// ‖f̂ − P̂‖² per sample, [N].
inline Var embedding_loss_ne(const EmbeddedPair& pair) {
    Var d = diff::sub(pair.f_e_hat, pair.P_e_hat);
    return diff::sum_axis(diff::elementwise_mul(d, d), 1);
}

/// Σ p log(p/q) along the last axis of rows of probabilities, each floored
/// at `floor` first. Returns one value per row.
inline Var kl_divergence(const Var& p, const Var& q, double floor) {
    Var pf = diff::clamp_min(p, floor);
    Var qf = diff::clamp_min(q, floor);
    Var terms = diff::elementwise_mul(pf, diff::sub(diff::log(pf), diff::log(qf)));
    return diff::sum_axis(terms, terms.shape().size() - 1);
}

/// KL variants on the softmax of the normalized embeddings, per sample [N].
inline Var embedding_loss_kl(const EmbeddedPair& pair, EmbeddingLossKind kind, double floor = 1e-8) {
    Var pf = diff::softmax_lastdim(pair.f_e_hat);
    Var pp = diff::softmax_lastdim(pair.P_e_hat);
    switch (kind) {
        case EmbeddingLossKind::kl_fp: return kl_divergence(pf, pp, floor);
        case EmbeddingLossKind::kl_pf: return kl_divergence(pp, pf, floor);
        case EmbeddingLossKind::kl_bi: return diff::add(kl_divergence(pf, pp, floor), kl_divergence(pp, pf, floor));
        case EmbeddingLossKind::ne: break;
    }
    throw Error("embedding_loss_kl: 'ne' is not a KL variant");
}

inline Var embedding_loss(const EmbeddedPair& pair, EmbeddingLossKind kind, double floor = 1e-8) {
    return kind == EmbeddingLossKind::ne ? embedding_loss_ne(pair) : embedding_loss_kl(pair, kind, floor);
}

/// One row per sample: id, loss, then the coordinates of f̂ and P̂.
inline void write_embedding_csv(std::ostream& out, const std::vector<std::string>& ids, const EmbeddedPair& pair,
                                const Var& loss, bool header = true) {
    const std::size_t N = pair.f_e_hat.shape()[0], D = pair.f_e_hat.shape()[1];
    detail::require(ids.size() == N, "write_embedding_csv: ", ids.size(), " ids for ", N, " samples");
    if (header) {
        out << "id,loss";
        for (std::size_t i = 0; i < D; ++i) out << ",f_hat_" << i;
        for (std::size_t i = 0; i < D; ++i) out << ",p_hat_" << i;
        out << '\n';
    }
    out << std::setprecision(17);
    for (std::size_t b = 0; b < N; ++b) {
        out << ids[b] << ',' << loss.value()[b];
        for (std::size_t i = 0; i < D; ++i) out << ',' << pair.f_e_hat.value()[b * D + i];
        for (std::size_t i = 0; i < D; ++i) out << ',' << pair.P_e_hat.value()[b * D + i];
        out << '\n';
    }
}

}  // namespace vpn
