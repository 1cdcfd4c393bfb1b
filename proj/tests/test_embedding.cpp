#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"
#include "vpn/embedding.hpp"

using namespace vpn;
using testing_support::random_tensor;

namespace {

constexpr double kEps = 1e-12;

EmbeddedPair pair_of(const Tensor& f, const Tensor& p) {
    Var fv(f), pv(p);
    return {fv, pv, hypersphere_normalize(fv, kEps), hypersphere_normalize(pv, kEps)};
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST(SpatialPool, TrivialCases) {
    std::mt19937_64 rng(1);
    Tensor one = random_tensor(rng, {1, 1, 2, 3, 2});
    Tensor pooled = spatial_pool(Var(one)).value();
    EXPECT_EQ(pooled.shape(), (Shape{1, 12}));
    EXPECT_EQ(pooled.to_vector(), one.to_vector());
    Tensor zero = spatial_pool(Var(Tensor::zeros({2, 3, 2, 2, 2}))).value();
    for (double v : zero.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(spatial_pool(Var(Tensor::full({1, 2, 1, 1, 1}, 1.0))).value().to_vector(), std::vector<double>{2.0});
}

TEST(SpatialPool, SumsOverTimeOnly) {
    std::mt19937_64 rng(2);
    const std::size_t T = 3, M = 2, N = 2, C = 3;
    Tensor f = random_tensor(rng, {1, T, M, N, C});
    Tensor s = spatial_pool(Var(f)).value();
    for (std::size_t k = 0; k < M * N * C; ++k) {
        double acc = 0.0;
        for (std::size_t t = 0; t < T; ++t) acc += f[t * M * N * C + k];
        EXPECT_NEAR(s[k], acc, 1e-14);
    }
}

TEST(Hypersphere, ThreeFourFiveAndZero) {
    Tensor u = hypersphere_normalize(Var(Tensor({1, 2}, {3, 4})), kEps).value();
    EXPECT_NEAR(u[0], 0.6, 1e-12);
    EXPECT_NEAR(u[1], 0.8, 1e-12);
    Tensor z = hypersphere_normalize(Var(Tensor::zeros({1, 5})), kEps).value();
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Hypersphere, NormNeverExceedsOne) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const double scale = std::pow(10.0, static_cast<double>(trial % 12) - 8.0);
        Tensor v = random_tensor(rng, {1, 6}, -scale, scale);
        Tensor u = hypersphere_normalize(Var(v), kEps).value();
        const double n = std::sqrt(dot(u, u));
        EXPECT_LE(n, 1.0 + 1e-15);
        if (scale >= 1e-3) EXPECT_GE(n, 1.0 - 1e-6);
    }
}

TEST(Project, ScaledIdentityAndZeroLatent) {
    ParameterSet params;
    init_embedding(params, 3, 2, 3, 1);
    params.set("emb.T_v", Tensor({3, 3}, {0.5, 0, 0, 0, 0.5, 0, 0, 0, 0.5}));
    Binding bind(params, nullptr);
    Tensor fs({1, 3}, {1.0, -2.0, 4.0});
    auto pair = project(bind, Var(fs), Var(Tensor::zeros({1, 2})), kEps);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(pair.f_e.value()[i], 0.5 * fs[i]);
    for (double v : pair.P_e.value().values()) EXPECT_EQ(v, 0.0);
    for (double v : pair.P_e_hat.value().values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Project, HandProduct) {
    ParameterSet params;
    init_embedding(params, 2, 2, 3, 1);
    Tensor Tp({3, 2}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6});
    params.set("emb.T_p", Tp);
    Binding bind(params, nullptr);
    Tensor z({1, 2}, {2.0, -1.0});
    auto pair = project(bind, Var(Tensor::zeros({1, 2})), Var(z), kEps);
    const double expect[3] = {0.1 * 2 + 0.2, 0.3 * 2 - 0.4, -0.5 * 2 - 0.6};
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(pair.P_e.value()[i], expect[i], 1e-15);
    EXPECT_THROW(project(bind, Var(Tensor::zeros({1, 2})), Var(Tensor::zeros({1, 3})), kEps), ShapeError);
}

TEST(NormalizedEuclidean, AnalyticCases) {
    Tensor u({1, 3}, {1.0, 2.0, -2.0});
    Tensor neg({1, 3}, {-1.0, -2.0, 2.0});
    Tensor orth({1, 3}, {2.0, 1.0, 2.0});
    EXPECT_NEAR(embedding_loss_ne(pair_of(u, u)).value()[0], 0.0, 1e-9);
    EXPECT_NEAR(embedding_loss_ne(pair_of(u, neg)).value()[0], 4.0, 1e-9);
    EXPECT_NEAR(embedding_loss_ne(pair_of(u, orth)).value()[0], 2.0, 1e-9);
}

TEST(NormalizedEuclidean, BoundsCosineIdentityAndScaleInvariance) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor a = random_tensor(rng, {1, 5});
        Tensor b = random_tensor(rng, {1, 5});
        auto pair = pair_of(a, b);
        const double L = embedding_loss_ne(pair).value()[0];
        EXPECT_GE(L, 0.0);
        EXPECT_LE(L, 4.0);
        const double cos = dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
        EXPECT_NEAR(L, 2.0 - 2.0 * cos, 1e-9);

        std::vector<double> scaled = a.to_vector();
        const double k = std::uniform_real_distribution<double>(0.1, 50.0)(rng);
        for (auto& v : scaled) v *= k;
        EXPECT_NEAR(embedding_loss_ne(pair_of(Tensor(a.shape(), scaled), b)).value()[0], L, 1e-9);
    }
}

TEST(NormalizedEuclidean, ScaleInvarianceThroughProjection) {
    std::mt19937_64 rng(5);
    ParameterSet params;
    init_embedding(params, 6, 4, 3, 7);
    Binding bind(params, nullptr);
    Tensor fs = random_tensor(rng, {1, 6});
    Tensor z = random_tensor(rng, {1, 4});
    const double base = embedding_loss_ne(project(bind, Var(fs), Var(z), kEps)).value()[0];
    std::vector<double> f3 = fs.to_vector(), z7 = z.to_vector();
    for (auto& v : f3) v *= 3.0;
    for (auto& v : z7) v *= 0.07;
    const double scaled =
        embedding_loss_ne(project(bind, Var(Tensor(fs.shape(), f3)), Var(Tensor(z.shape(), z7)), kEps)).value()[0];
    EXPECT_NEAR(scaled, base, 1e-9);
}

TEST(NormalizedEuclidean, GradientFlowsToBothSides) {
    std::mt19937_64 rng(6);
    ParameterSet params;
    init_embedding(params, 6, 4, 3, 7);
    diff::Tape tape;
    Binding bind(params, &tape);
    Var fs = tape.leaf(random_tensor(rng, {1, 6}));
    Var z = tape.leaf(random_tensor(rng, {1, 4}));
    Var L = diff::sum_all(embedding_loss_ne(project(bind, fs, z, kEps)));
    auto grads = diff::backward(tape, L);
    auto norm = [](const Tensor& g) {
        double s = 0.0;
        for (double v : g.values()) s += v * v;
        return std::sqrt(s);
    };
    EXPECT_GT(norm(grads[fs]), 1e-6);
    EXPECT_GT(norm(grads[z]), 1e-6);
}

TEST(NormalizedEuclidean, FiniteDifferencesOnProjection) {
    std::mt19937_64 rng(7);
    ParameterSet params;
    init_embedding(params, 4, 4, 4, 3);
    Var fs(random_tensor(rng, {1, 4}));
    Var z(random_tensor(rng, {1, 4}));
    auto report = gradcheck_parameters(params, {"emb.T_v"}, [&](Binding& bind) {
        return diff::sum_all(embedding_loss_ne(project(bind, fs, z, kEps)));
    });
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(KlDivergence, ScalarEvaluation) {
    Var p(Tensor({1, 2}, {0.9, 0.1}));
    Var q(Tensor({1, 2}, {0.5, 0.5}));
    const double expect = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
    const double got = kl_divergence(p, q, 1e-8).value()[0];
    EXPECT_NEAR(got, expect, 1e-15);
    EXPECT_NEAR(got, 0.3681, 1e-4);
}

TEST(KlDivergence, FloorGuardsZeroProbabilities) {
    Var p(Tensor({1, 2}, {1.0, 0.0}));
    Var q(Tensor({1, 2}, {0.0, 1.0}));
    const double got = kl_divergence(p, q, 1e-8).value()[0];
    EXPECT_TRUE(std::isfinite(got));
    EXPECT_NEAR(got, std::log(1.0 / 1e-8) + 1e-8 * std::log(1e-8), 1e-9);
}

TEST(KlDivergence, IdenticalZeroSymmetricAndNonNegative) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = random_tensor(rng, {2, 4});
        Tensor b = random_tensor(rng, {2, 4});
        auto same = pair_of(a, a);
        for (auto kind : {EmbeddingLossKind::kl_fp, EmbeddingLossKind::kl_pf, EmbeddingLossKind::kl_bi})
            EXPECT_EQ(embedding_loss_kl(same, kind).value().to_vector(), std::vector<double>(2, 0.0));
        auto ab = pair_of(a, b), ba = pair_of(b, a);
        Tensor bi1 = embedding_loss_kl(ab, EmbeddingLossKind::kl_bi).value();
        Tensor bi2 = embedding_loss_kl(ba, EmbeddingLossKind::kl_bi).value();
        for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(bi1[i], bi2[i], 1e-15);
        Tensor fp = embedding_loss_kl(ab, EmbeddingLossKind::kl_fp).value();
        Tensor pf = embedding_loss_kl(ab, EmbeddingLossKind::kl_pf).value();
        for (std::size_t i = 0; i < 2; ++i) {
            EXPECT_GT(fp[i], 0.0);
            EXPECT_GT(pf[i], 0.0);
            EXPECT_NEAR(bi1[i], fp[i] + pf[i], 1e-15);
        }
    }
}

TEST(KlDivergence, FiniteDifferencesForEveryVariant) {
    std::mt19937_64 rng(9);
    ParameterSet params;
    init_embedding(params, 5, 3, 4, 3);
    Var fs(random_tensor(rng, {2, 5}));
    Var z(random_tensor(rng, {2, 3}));
    for (auto kind : {EmbeddingLossKind::kl_fp, EmbeddingLossKind::kl_pf, EmbeddingLossKind::kl_bi}) {
        auto report = gradcheck_parameters(params, projection_names(), [&](Binding& bind) {
            return diff::sum_all(embedding_loss(project(bind, fs, z, kEps), kind));
        });
        EXPECT_LT(report.max_rel_error, 1e-4) << to_string(kind);
    }
}

TEST(NormConstraint, HalvesAndIsIdempotent) {
    Tensor m({2, 2}, {1.0, 1.0, 1.0, 1.0});  // Frobenius norm 2
    Tensor h = enforce_norm_constraint(m);
    for (double v : h.values()) EXPECT_EQ(v, 0.5);
    std::mt19937_64 rng(10);
    Tensor u = enforce_norm_constraint(random_tensor(rng, {4, 7}));
    EXPECT_NEAR(frobenius_norm(u), 1.0, 1e-12);
    Tensor again = enforce_norm_constraint(u);
    for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(again[i], u[i], 1e-12);
    EXPECT_THROW(enforce_norm_constraint(Tensor::zeros({2, 3})), Error);
}

TEST(NormConstraint, InitialProjectionsAreUnit) {
    ParameterSet params;
    init_embedding(params, 12, 5, 8, 99);
    EXPECT_NEAR(frobenius_norm(params.get("emb.T_v")), 1.0, 1e-12);
    EXPECT_NEAR(frobenius_norm(params.get("emb.T_p")), 1.0, 1e-12);
}

TEST(EmbeddingLossKind, ParsesNames) {
    EXPECT_EQ(parse_embedding_loss("kl_bi"), EmbeddingLossKind::kl_bi);
    EXPECT_EQ(std::string(to_string(EmbeddingLossKind::kl_pf)), "kl_pf");
    EXPECT_THROW(parse_embedding_loss("cosine"), Error);
}

TEST(EmbeddingDump, OneRowPerSample) {
    auto pair = pair_of(Tensor({2, 2}, {3, 4, 1, 0}), Tensor({2, 2}, {3, 4, 0, 1}));
    std::ostringstream out;
    write_embedding_csv(out, {"a", "b"}, pair, embedding_loss_ne(pair));
    EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "id,loss,f_hat_0,f_hat_1,p_hat_0,p_hat_1");
    EXPECT_NE(out.str().find("\nb,1.99999"), std::string::npos);
}
