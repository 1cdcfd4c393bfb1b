#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"
#include "vpn/attention.hpp"

using namespace vpn;
using testing_support::random_tensor;

namespace {

AttentionGeometry geometry(std::size_t t_c, std::size_t m, std::size_t n) { return {t_c, m, n}; }

void fill_all(ParameterSet& params, double v) {
    for (const auto& name : std::vector<std::string>(params.names()))
        params.set(name, Tensor::full(params.get(name).shape(), v));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(LatentVectors, ZeroParametersGiveZero) {
    ParameterSet params;
    auto g = geometry(4, 2, 3);
    init_attention(params, 10, 5, g, 1);
    fill_all(params, 0.0);
    Binding bind(params, nullptr);
    std::mt19937_64 rng(1);
    auto z = latent_vectors(bind, Var(random_tensor(rng, {2, 10})));
    for (double v : z.z1.value().values()) EXPECT_EQ(v, 0.0);
    for (double v : z.z2.value().values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(z.z1.shape(), (Shape{2, 6}));
    EXPECT_EQ(z.z2.shape(), (Shape{2, 4}));
}

TEST(LatentVectors, ConstantPathThroughBias) {
    ParameterSet params;
    auto g = geometry(3, 2, 2);
    init_attention(params, 6, 4, g, 1);
    fill_all(params, 0.0);
    params.set("att.b_h1", Tensor::full({4}, 0.7));
    params.set("att.b_h2", Tensor::full({4}, -1.1));
    params.set("att.b_z1", Tensor::full({4}, 0.25));
    params.set("att.b_z2", Tensor::full({3}, -2.0));
    Binding bind(params, nullptr);
    std::mt19937_64 rng(2);
    auto z = latent_vectors(bind, Var(random_tensor(rng, {1, 6})));
    for (double v : z.z1.value().values()) EXPECT_EQ(v, 0.25);
    for (double v : z.z2.value().values()) EXPECT_EQ(v, -2.0);
}

TEST(LatentVectors, MatchesHandArithmetic) {
    // h* of width 8, trunks 2×8, heads 4×2 (spatial, m=n=2) and 3×2 (temporal).
    std::mt19937_64 rng(3);
    ParameterSet params;
    auto g = geometry(3, 2, 2);
    init_attention(params, 8, 2, g, 1);
    for (const auto& name : std::vector<std::string>(params.names()))
        params.set(name, random_tensor(rng, params.get(name).shape()));
    Tensor h = random_tensor(rng, {1, 8});
    Binding bind(params, nullptr);
    auto z = latent_vectors(bind, Var(h));
    for (int r = 1; r <= 2; ++r) {
        const std::string s = std::to_string(r);
        const Tensor& Wh = params.get("att.W_h" + s);
        const Tensor& bh = params.get("att.b_h" + s);
        const Tensor& Wz = params.get("att.W_z" + s);
        const Tensor& bz = params.get("att.b_z" + s);
        double hidden[2];
        for (int a = 0; a < 2; ++a) {
            double acc = bh[a];
            for (int k = 0; k < 8; ++k) acc += Wh[a * 8 + k] * h[k];
            hidden[a] = std::tanh(acc);
        }
        const Var& out = r == 1 ? z.z1 : z.z2;
        for (std::size_t o = 0; o < out.value().size(); ++o)
            EXPECT_NEAR(out.value()[o], Wz[o * 2] * hidden[0] + Wz[o * 2 + 1] * hidden[1] + bz[o], 1e-14);
    }
}

TEST(LatentVectors, RejectsShapeMismatch) {
    ParameterSet params;
    init_attention(params, 6, 4, geometry(3, 2, 2), 1);
    Binding bind(params, nullptr);
    EXPECT_THROW(latent_vectors(bind, Var(Tensor::zeros({1, 5}))), ShapeError);
}

TEST(AttentionWeights, TrivialCases) {
    auto g = geometry(4, 7, 7);
    LatentAttentionVectors z{Var(Tensor::zeros({1, 49})), Var(Tensor::full({1, 4}, 3.3))};
    auto [A_S, A_T] = attention_weights(z, g);
    EXPECT_EQ(A_S.shape(), (Shape{1, 7, 7}));
    for (double v : A_S.value().values()) EXPECT_EQ(v, 0.5);
    for (double v : A_T.value().values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(AttentionWeights, PeakedSoftmax) {
    LatentAttentionVectors z{Var(Tensor::zeros({1, 1})), Var(Tensor({1, 4}, {10, 0, 0, 0}))};
    auto [A_S, A_T] = attention_weights(z, geometry(4, 1, 1));
    const double denom = std::exp(10.0) + 3.0;
    EXPECT_NEAR(A_T.value()[0], std::exp(10.0) / denom, 1e-15);
    EXPECT_NEAR(A_T.value()[0], 0.99986, 1e-5);
    for (int t = 1; t < 4; ++t) {
        EXPECT_NEAR(A_T.value()[t], 1.0 / denom, 1e-15);
        EXPECT_NEAR(A_T.value()[t], 4.5e-5, 1e-6);
    }
}

TEST(AttentionWeights, RangeSimplexAndMonotonicity) {
    std::mt19937_64 rng(4);
    auto g = geometry(5, 3, 2);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor z1 = random_tensor(rng, {2, 6}, -30, 30);
        Tensor z2 = random_tensor(rng, {2, 5}, -30, 30);
        auto [A_S, A_T] = attention_weights({Var(z1), Var(z2)}, g);
        for (double v : A_S.value().values()) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
        for (int b = 0; b < 2; ++b) {
            double s = 0.0;
            for (int t = 0; t < 5; ++t) s += A_T.value()[b * 5 + t];
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
        const std::size_t k = rng() % 10;
        std::vector<double> bumped = z2.to_vector();
        bumped[k] += 0.5;
        auto [unused, A_T2] = attention_weights({Var(z1), Var(Tensor({2, 5}, bumped))}, g);
        EXPECT_GT(A_T2.value()[k], A_T.value()[k]);
    }
}

TEST(Couple, FactorizationIsExact) {
    std::mt19937_64 rng(5);
    Tensor S = random_tensor(rng, {2, 3, 4}, 0.01, 0.99);
    Tensor T = random_tensor(rng, {2, 5}, 0.0, 1.0);
    Tensor A = couple(Var(S), Var(T)).value();
    EXPECT_EQ(A.shape(), (Shape{2, 3, 4, 5}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t t = 0; t < 5; ++t) {
                    const double expect = S[(b * 3 + i) * 4 + j] * T[b * 5 + t];
                    EXPECT_EQ(A[((b * 3 + i) * 4 + j) * 5 + t], expect);
                }
}

TEST(Couple, OneHotUniformAndSum) {
    std::mt19937_64 rng(6);
    Tensor S = random_tensor(rng, {1, 2, 2}, 0.1, 0.9);
    Tensor A = couple(Var(S), Var(Tensor({1, 3}, {0, 1, 0}))).value();
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(A[c * 3 + t], t == 1 ? S[c] : 0.0);

    Tensor U = couple(Var(Tensor::full({1, 2, 2}, 1.0)), Var(Tensor::full({1, 4}, 0.25))).value();
    for (double v : U.values()) EXPECT_EQ(v, 0.25);

    auto [A_S, A_T] = attention_weights({Var(random_tensor(rng, {1, 4})), Var(random_tensor(rng, {1, 3}))},
                                        geometry(3, 2, 2));
    Tensor C = couple(A_S, A_T).value();
    double total = 0.0, spatial = 0.0;
    for (double v : C.values()) total += v;
    for (double v : A_S.value().values()) spatial += v;
    EXPECT_NEAR(total, spatial, 1e-12);
}

TEST(Modulate, ResidualIdentityAndDoubling) {
    std::mt19937_64 rng(7);
    Tensor f = random_tensor(rng, {2, 3, 2, 2, 4});
    Tensor zero = modulate(Var(f), Var(Tensor::zeros({2, 2, 2, 3}))).value();
    EXPECT_TRUE(zero.bitwise_equal(f));
    Tensor twice = modulate(Var(f), Var(Tensor::full({2, 2, 2, 3}, 1.0))).value();
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(twice[i], 2.0 * f[i]);
    Tensor single = modulate(Var(Tensor({1, 1, 1, 1, 1}, {1.5})), Var(Tensor({1, 1, 1, 1}, {0.3}))).value();
    EXPECT_DOUBLE_EQ(single[0], 1.5 * (1.0 + 0.3));
}

TEST(Modulate, WeightsIndexSpaceTimeCells) {
    // f[t,i,j,c] must be scaled by A_ST[i,j,t] for every channel c.
    std::mt19937_64 rng(8);
    const std::size_t T = 3, M = 2, N = 4, C = 2;
    Tensor f = random_tensor(rng, {1, T, M, N, C});
    Tensor A = random_tensor(rng, {1, M, N, T});
    Tensor out = modulate(Var(f), Var(A)).value();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j)
                for (std::size_t c = 0; c < C; ++c) {
                    const double fv = f[((t * M + i) * N + j) * C + c];
                    EXPECT_EQ(out[((t * M + i) * N + j) * C + c], A[(i * N + j) * T + t] * fv + fv);
                }
}

TEST(Modulate, RejectsExtentMismatch) {
    EXPECT_THROW(modulate(Var(Tensor::zeros({1, 3, 2, 2, 1})), Var(Tensor::zeros({1, 2, 2, 4}))), ShapeError);
    EXPECT_THROW(dissociated_modulate(Var(Tensor::zeros({1, 3, 2, 2, 1})), Var(Tensor::zeros({1, 3, 2})),
                                      Var(Tensor::zeros({1, 3}))),
                 ShapeError);
}

TEST(Dissociated, ZeroWeightsDuplicateTheMap) {
    std::mt19937_64 rng(9);
    Tensor f = random_tensor(rng, {1, 2, 2, 2, 3});
    Tensor out = dissociated_modulate(Var(f), Var(Tensor::zeros({1, 2, 2})), Var(Tensor::zeros({1, 2}))).value();
    EXPECT_EQ(out.shape(), (Shape{1, 2, 2, 2, 6}));
    for (std::size_t cell = 0; cell < 8; ++cell)
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_EQ(out[cell * 6 + c], f[cell * 3 + c]);
            EXPECT_EQ(out[cell * 6 + 3 + c], f[cell * 3 + c]);
        }
}

TEST(Dissociated, StreamProductRecoversCoupledWeighting) {
    // On a 2×2×2×1 map: (s1 − f)(s2 − f)/f = A_S·A_T·f = modulate(f, A_ST) − f.
    std::mt19937_64 rng(10);
    Tensor f = random_tensor(rng, {1, 2, 2, 2, 1}, 0.5, 2.0);
    Tensor S = random_tensor(rng, {1, 2, 2}, 0.1, 0.9);
    Tensor T({1, 2}, {0.3, 0.7});
    Tensor two = dissociated_modulate(Var(f), Var(S), Var(T)).value();
    Tensor coupled = modulate(Var(f), couple(Var(S), Var(T))).value();
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                const std::size_t cell = (t * 2 + i) * 2 + j;
                const double fv = f[cell];
                const double s1 = two[cell * 2], s2 = two[cell * 2 + 1];
                EXPECT_NEAR((s1 - fv) * (s2 - fv) / fv, coupled[cell] - fv, 1e-12);
            }
}

TEST(Attention, GradientsThroughLatentCoupleModulate) {
    std::mt19937_64 rng(11);
    auto g = geometry(2, 2, 2);
    ParameterSet params;
    init_attention(params, 5, 3, g, 2);
    for (const auto& name : std::vector<std::string>(params.names()))
        params.set(name, random_tensor(rng, params.get(name).shape()));
    Var h(random_tensor(rng, {2, 5}));
    Var f(random_tensor(rng, {2, 2, 2, 2, 3}));
    Var w(random_tensor(rng, {2, 2, 2, 2, 3}));
    Var w2(random_tensor(rng, {2, 2, 2, 2, 6}));
    auto report = gradcheck_parameters(params, params.names(), [&](Binding& bind) {
        auto att = coupled_attention(latent_vectors(bind, h), g);
        return diff::sum_all(diff::elementwise_mul(modulate(f, att.A_ST), w));
    });
    EXPECT_LT(report.max_rel_error, 1e-4);
    auto report2 = gradcheck_parameters(params, params.names(), [&](Binding& bind) {
        auto att = coupled_attention(latent_vectors(bind, h), g);
        return diff::sum_all(diff::elementwise_mul(dissociated_modulate(f, att.A_S, att.A_T), w2));
    });
    EXPECT_LT(report2.max_rel_error, 1e-4);
}

TEST(Resize, IdentityAtEqualSizeAndBilinearOtherwise) {
    std::mt19937_64 rng(12);
    Tensor A = random_tensor(rng, {2, 3, 3}, 0.0, 1.0);
    EXPECT_TRUE(resize_spatial(Var(A), 3, 3).value().bitwise_equal(A));

    Tensor small({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
    Tensor big = resize_spatial(Var(small), 3, 5).value();
    // Align-corners bilinear oracle: value = (1−u)(1−v)a + ... with u = i/2, v = j/4.
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            const double u = i / 2.0, v = j / 4.0;
            const double expect = (1 - u) * (1 - v) * 0.0 + (1 - u) * v * 1.0 + u * (1 - v) * 2.0 + u * v * 3.0;
            EXPECT_NEAR(big[i * 5 + j], expect, 1e-14);
        }
    Tensor constant = resize_spatial(Var(Tensor::full({1, 3, 2}, 0.4)), 7, 9).value();
    for (double v : constant.values()) EXPECT_NEAR(v, 0.4, 1e-15);
}

TEST(AttentionDump, WritesOneRowPerEntry) {
    auto g = geometry(2, 2, 3);
    LatentAttentionVectors z{Var(Tensor::zeros({1, 6})), Var(Tensor::zeros({1, 2}))};
    auto att = coupled_attention(z, g);
    std::ostringstream out;
    write_attention_csv(out, {"s0"}, att);
    std::istringstream in(out.str());
    std::string line;
    std::size_t rows = 0;
    std::getline(in, line);
    EXPECT_EQ(line, "id,tensor,i,j,t,value");
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 6u + 2u + 12u);
    EXPECT_NE(out.str().find("s0,A_ST,1,2,1,0.25"), std::string::npos);
}
