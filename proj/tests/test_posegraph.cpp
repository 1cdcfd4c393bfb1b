#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "support.hpp"
#include "vpn/posegraph.hpp"

using namespace vpn;
using testing_support::max_abs_diff;
using testing_support::random_tensor;

namespace {

SkeletonTopology chain3() { return SkeletonTopology(3, {{0, 1}, {1, 2}}); }

PoseSequence random_pose(std::mt19937_64& rng, std::size_t J, std::size_t T) {
    return PoseSequence(random_tensor(rng, {3, J, T}));
}

PoseBackboneConfig small_gcn(std::size_t J, std::size_t T) {
    PoseBackboneConfig cfg;
    cfg.joints = J;
    cfg.frames = T;
    cfg.d_g = 4;
    cfg.conv_channels = {3, 5, 2};
    return cfg;
}

}  // namespace

TEST(Adjacency, ChainMatchesPiecewiseRule) {
    auto adj = build_adjacency(chain3(), 5.0, 2.0);
    const std::vector<double> expected{0, 5, 2, 5, 0, 5, 2, 5, 0};
    EXPECT_EQ(adj.E.to_vector(), expected);
}

TEST(Adjacency, DegenerateSkeletons) {
    EXPECT_EQ(build_adjacency(SkeletonTopology(1, {}), 5, 2).E.to_vector(), std::vector<double>{0.0});
    EXPECT_EQ(build_adjacency(SkeletonTopology(2, {{0, 1}}), 1, 1).E.to_vector(),
              (std::vector<double>{0, 1, 1, 0}));
}

TEST(Adjacency, NormalizedChainMatchesHandComputation) {
    Tensor A = normalize_adjacency(build_adjacency(chain3(), 5.0, 2.0));
    // Degrees of E + I: 1+5+2, 5+1+5, 2+5+1.
    const double d[3] = {8.0, 11.0, 8.0};
    const double EI[3][3] = {{1, 5, 2}, {5, 1, 5}, {2, 5, 1}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_NEAR(A[i * 3 + j], EI[i][j] / std::sqrt(d[i] * d[j]), 1e-12);
    EXPECT_NEAR(A[1], 0.53300179, 1e-8);
    EXPECT_NEAR(A[0], 0.125, 1e-12);
}

TEST(Adjacency, SingleJointNormalizesToOne) {
    Tensor A = normalize_adjacency(build_adjacency(SkeletonTopology(1, {}), 5, 2));
    EXPECT_EQ(A.to_vector(), std::vector<double>{1.0});
}

TEST(Adjacency, NormalizedIsSymmetricForRandomTopologies) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t J = 2 + rng() % 9;
        std::vector<std::pair<std::size_t, std::size_t>> bones;
        for (std::size_t j = 1; j < J; ++j) bones.emplace_back(rng() % j, j);
        Tensor A = normalize_adjacency(build_adjacency(SkeletonTopology(J, bones), 5, 2));
        for (std::size_t i = 0; i < J; ++i)
            for (std::size_t j = 0; j < J; ++j) EXPECT_NEAR(A[i * J + j], A[j * J + i], 1e-12);
    }
}

TEST(Topology, RejectsSelfPairsAndOutOfRange) {
    EXPECT_THROW(SkeletonTopology(3, {{1, 1}}), Error);
    EXPECT_THROW(SkeletonTopology(3, {{0, 3}}), Error);
    EXPECT_THROW(SkeletonTopology(0, {}), Error);
}

TEST(Topology, DisconnectedGraphWarnsButIsAccepted) {
    warnings_enabled() = false;
    const auto before = warning_count().load();
    SkeletonTopology t(4, {{0, 1}, {2, 3}});
    EXPECT_FALSE(t.connected());
    EXPECT_EQ(warning_count().load(), before + 1);
    warnings_enabled() = true;
}

TEST(Topology, FileRoundTripAndDiagnostics) {
    SkeletonTopology t(4, {{0, 1}, {1, 2}, {1, 3}});
    std::stringstream ss;
    write_topology(ss, t);
    auto back = parse_topology(ss);
    EXPECT_EQ(back.joints, 4u);
    EXPECT_EQ(back.bones, t.bones);

    std::istringstream bad("# skeleton\njoints 3\n0 1\n1 x\n");
    try {
        parse_topology(bad, "skel.txt");
        FAIL() << "malformed bone accepted";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("skel.txt:4"), std::string::npos) << e.what();
    }
    std::istringstream no_header("0 1\n");
    EXPECT_THROW(parse_topology(no_header), FormatError);
    std::istringstream out_of_range("joints 2\n0 2\n");
    EXPECT_THROW(parse_topology(out_of_range), FormatError);
}

TEST(GcnFrame, SingleJointIdentityPropagation) {
    Var P(Tensor({3, 1}, {0.3, -1.2, 2.5}));
    Var A(Tensor::identity(1));
    Var W(Tensor::identity(3));
    EXPECT_EQ(gcn_frame(P, A, W).value().to_vector(), (std::vector<double>{0.3, -1.2, 2.5}));
}

TEST(GcnFrame, ZeroPoseGivesZeroFeatures) {
    std::mt19937_64 rng(1);
    Var A(normalize_adjacency(build_adjacency(chain3(), 5, 2)));
    Var out = gcn_frame(Var(Tensor::zeros({3, 3})), A, Var(random_tensor(rng, {3, 64})));
    for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(GcnFrame, TwoJointHandProduct) {
    // Â = [[0.5,0.5],[0.5,0.5]], joints at (1,2,3) and (4,5,6), W = [[1,0],[0,1],[1,1]].
    Var A(Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5}));
    Var P(Tensor({3, 2}, {1, 4, 2, 5, 3, 6}));
    Var W(Tensor({3, 2}, {1, 0, 0, 1, 1, 1}));
    // Â·G = [[2.5,3.5,4.5],[2.5,3.5,4.5]]; times W → [[7,8],[7,8]].
    EXPECT_EQ(gcn_frame(P, A, W).value().to_vector(), (std::vector<double>{7, 8, 7, 8}));
}

TEST(GcnFrame, LinearInPoseAndWeights) {
    std::mt19937_64 rng(3);
    Var A(normalize_adjacency(build_adjacency(chain3(), 5, 2)));
    Tensor P = random_tensor(rng, {3, 3});
    Tensor W = random_tensor(rng, {3, 6});
    const double a = -1.75;
    Tensor base = gcn_frame(Var(P), A, Var(W)).value();
    std::vector<double> sp = P.to_vector(), sw = W.to_vector();
    for (auto& v : sp) v *= a;
    for (auto& v : sw) v *= a;
    Tensor by_p = gcn_frame(Var(Tensor(P.shape(), sp)), A, Var(W)).value();
    Tensor by_w = gcn_frame(Var(P), A, Var(Tensor(W.shape(), sw))).value();
    for (std::size_t i = 0; i < base.size(); ++i) {
        EXPECT_NEAR(by_p[i], a * base[i], 1e-12);
        EXPECT_NEAR(by_w[i], a * base[i], 1e-12);
    }
}

TEST(GcnFrame, PermutationEquivariance) {
    std::mt19937_64 rng(11);
    const std::size_t J = 5;
    SkeletonTopology topo(J, {{0, 1}, {1, 2}, {1, 3}, {3, 4}});
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};  // new joint k is old joint perm[k]
    std::vector<std::pair<std::size_t, std::size_t>> relabeled;
    std::vector<std::size_t> inverse(J);
    for (std::size_t k = 0; k < J; ++k) inverse[perm[k]] = k;
    for (auto [a, b] : topo.bones) relabeled.emplace_back(inverse[a], inverse[b]);
    SkeletonTopology permuted(J, relabeled);

    Tensor P = random_tensor(rng, {3, J});
    std::vector<double> pp(3 * J);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t k = 0; k < J; ++k) pp[a * J + k] = P[a * J + perm[k]];
    Var W(random_tensor(rng, {3, 4}));

    Tensor f = gcn_frame(Var(P), Var(normalize_adjacency(build_adjacency(topo, 5, 2))), W).value();
    Tensor g = gcn_frame(Var(Tensor({3, J}, pp)), Var(normalize_adjacency(build_adjacency(permuted, 5, 2))), W).value();
    for (std::size_t k = 0; k < J; ++k)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(g[k * 4 + c], f[perm[k] * 4 + c], 1e-12);
}

TEST(GcnFrame, RejectsShapeMismatch) {
    Var A(Tensor::identity(3));
    EXPECT_THROW(gcn_frame(Var(Tensor::zeros({3, 2})), A, Var(Tensor::zeros({3, 4}))), ShapeError);
    EXPECT_THROW(gcn_frame(Var(Tensor::zeros({2, 3})), A, Var(Tensor::zeros({3, 4}))), ShapeError);
}

TEST(PoseSequence, FrameSlicesAndStacking) {
    std::mt19937_64 rng(5);
    PoseSequence p = random_pose(rng, 4, 3);
    auto back = PoseSequence::from_frames({p.frame(0), p.frame(1), p.frame(2)});
    EXPECT_TRUE(back.coords().bitwise_equal(p.coords()));
    Tensor stacked = stack_poses({&p});
    EXPECT_EQ(stacked.shape(), (Shape{1, 4, 3, 3}));
    EXPECT_EQ(stacked[((0 * 4 + 2) * 3 + 1) * 3 + 0], p.at(0, 2, 1));
    EXPECT_THROW(PoseSequence(Tensor::zeros({2, 4, 3})), ShapeError);
}

TEST(PoseBackbone, DefaultWidthsAndDistinctFrameWeights) {
    ParameterSet params;
    RunningStats running;
    PoseBackboneConfig cfg;
    cfg.joints = 8;
    cfg.frames = 5;
    init_pose_backbone(params, running, cfg, 42);
    EXPECT_EQ(cfg.d_g, 64u);
    EXPECT_EQ(cfg.conv_channels, (std::array<std::size_t, 3>{64, 64, 128}));
    for (std::size_t t = 0; t < cfg.frames; ++t) {
        EXPECT_EQ(params.get(gcn_weight_name(t)).shape(), (Shape{3, 64}));
        for (std::size_t u = 0; u < t; ++u)
            EXPECT_FALSE(params.get(gcn_weight_name(t)).bitwise_equal(params.get(gcn_weight_name(u))));
    }
    EXPECT_FALSE(params.contains(gcn_weight_name(cfg.frames)));
    EXPECT_EQ(cfg.output_width(), 8u * 5u * 128u);
    EXPECT_EQ(running.size(), 3u);
}

TEST(PoseBackbone, ZeroPosesGiveZeroFeatures) {
    ParameterSet params;
    RunningStats running;
    PoseBackboneConfig cfg = small_gcn(3, 4);
    init_pose_backbone(params, running, cfg, 1);
    PoseSequence zero(Tensor::zeros({3, 3, 4}));
    Tensor A = normalize_adjacency(build_adjacency(chain3(), 5, 2));
    for (bool training : {false, true}) {
        Binding bind(params, nullptr);
        ForwardContext ctx{bind, training, nullptr, &running};
        Var h = pose_backbone_forward(ctx, Var(stack_poses({&zero, &zero})), A, cfg);
        EXPECT_EQ(h.shape(), (Shape{2, 3 * 4 * 2}));
        for (double v : h.value().values()) EXPECT_EQ(v, 0.0);
    }
}

TEST(PoseBackbone, MatchesScriptedLoopOracle) {
    std::mt19937_64 rng(21);
    const std::size_t J = 3, T = 4, N = 2;
    PoseBackboneConfig cfg = small_gcn(J, T);
    ParameterSet params;
    RunningStats running;
    init_pose_backbone(params, running, cfg, 9);
    for (const auto& name : std::vector<std::string>(params.names()))
        params.set(name, random_tensor(rng, params.get(name).shape(), -0.8, 0.8));
    for (auto& [name, stats] : running) {
        for (auto& m : stats.mean) m = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
        for (auto& v : stats.var) v = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    }
    std::vector<PoseSequence> poses{random_pose(rng, J, T), random_pose(rng, J, T)};
    Tensor A = normalize_adjacency(build_adjacency(chain3(), 5, 2));

    Binding bind(params, nullptr);
    ForwardContext ctx{bind, false, nullptr, &running};
    Tensor h = pose_backbone_forward(ctx, Var(stack_poses({&poses[0], &poses[1]})), A, cfg).value();

    // Oracle: explicit loops over [n][j][t][c].
    using Map = std::vector<std::vector<std::vector<std::vector<double>>>>;
    auto alloc = [&](std::size_t C) { return Map(N, std::vector(J, std::vector(T, std::vector<double>(C, 0.0)))); };
    Map x = alloc(cfg.d_g);
    const Tensor& Wres = params.get("pose.res.W");
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 0; t < T; ++t) {
            const Tensor& Wt = params.get(gcn_weight_name(t));
            for (std::size_t j = 0; j < J; ++j)
                for (std::size_t c = 0; c < cfg.d_g; ++c) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < J; ++k)
                        for (std::size_t a = 0; a < 3; ++a) s += A[j * J + k] * poses[n].at(a, k, t) * Wt[a * cfg.d_g + c];
                    for (std::size_t a = 0; a < 3; ++a) s += poses[n].at(a, j, t) * Wres[a * cfg.d_g + c];
                    x[n][j][t][c] = s;
                }
        }
    std::size_t ci = cfg.d_g;
    for (std::size_t layer = 0; layer < 3; ++layer) {
        const std::string base = "pose.conv" + std::to_string(layer);
        const Tensor& w = params.get(base + ".w");
        const Tensor& b = params.get(base + ".b");
        const Tensor& gamma = params.get(base + ".bn.gamma");
        const Tensor& beta = params.get(base + ".bn.beta");
        const auto& stats = running.at(base + ".bn");
        const std::size_t co = cfg.conv_channels[layer];
        Map y = alloc(co);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t j = 0; j < J; ++j)
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t o = 0; o < co; ++o) {
                        double s = b[o];
                        for (int dj = -1; dj <= 1; ++dj)
                            for (int dt = -1; dt <= 1; ++dt) {
                                const long jj = long(j) + dj, tt = long(t) + dt;
                                if (jj < 0 || tt < 0 || jj >= long(J) || tt >= long(T)) continue;
                                for (std::size_t c = 0; c < ci; ++c)
                                    s += x[n][jj][tt][c] * w[(((dj + 1) * 3 + (dt + 1)) * ci + c) * co + o];
                            }
                        const double bn = gamma[o] * (s - stats.mean[o]) / std::sqrt(stats.var[o] + 1e-5) + beta[o];
                        y[n][j][t][o] = std::max(0.0, bn);
                    }
        x = std::move(y);
        ci = co;
    }
    std::size_t idx = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < J; ++j)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t o = 0; o < ci; ++o, ++idx) EXPECT_NEAR(h[idx], x[n][j][t][o], 1e-12);
    EXPECT_EQ(idx, h.size());
}

TEST(PoseBackbone, DeterministicAndRejectsFrameMismatch) {
    std::mt19937_64 rng(2);
    PoseBackboneConfig cfg = small_gcn(3, 4);
    ParameterSet params;
    RunningStats running;
    init_pose_backbone(params, running, cfg, 3);
    PoseSequence p = random_pose(rng, 3, 4);
    Tensor A = normalize_adjacency(build_adjacency(chain3(), 5, 2));
    auto run = [&] {
        Binding bind(params, nullptr);
        ForwardContext ctx{bind, false, nullptr, &running};
        return pose_backbone_forward(ctx, Var(stack_poses({&p})), A, cfg).value();
    };
    EXPECT_TRUE(run().bitwise_equal(run()));

    PoseSequence longer = random_pose(rng, 3, 5);
    Binding bind(params, nullptr);
    ForwardContext ctx{bind, false, nullptr, &running};
    EXPECT_THROW(pose_backbone_forward(ctx, Var(stack_poses({&longer})), A, cfg), Error);
}

TEST(PoseBackbone, GradientsMatchFiniteDifferencesInTrainingMode) {
    std::mt19937_64 rng(4);
    PoseBackboneConfig cfg = small_gcn(3, 3);
    ParameterSet params;
    RunningStats running;
    init_pose_backbone(params, running, cfg, 5);
    std::vector<PoseSequence> poses{random_pose(rng, 3, 3), random_pose(rng, 3, 3), random_pose(rng, 3, 3)};
    Var P(stack_poses({&poses[0], &poses[1], &poses[2]}));
    Tensor A = normalize_adjacency(build_adjacency(chain3(), 5, 2));
    Var head(random_tensor(rng, {3, cfg.output_width()}));
    auto report = gradcheck_parameters(params, params.names(), [&](Binding& bind) {
        ForwardContext ctx{bind, true};
        return diff::sum_all(diff::elementwise_mul(pose_backbone_forward(ctx, P, A, cfg), head));
    });
    EXPECT_LT(report.max_rel_error, 1e-4) << params.names()[report.worst_param];
}

TEST(RecurrentBackbone, ZeroInputIsFixedPoint) {
    PoseBackboneConfig cfg;
    cfg.kind = PoseBackboneKind::recurrent;
    cfg.joints = 3;
    cfg.frames = 4;
    cfg.lstm_hidden = 5;
    ParameterSet params;
    RunningStats running;
    init_pose_backbone(params, running, cfg, 8);
    PoseSequence zero(Tensor::zeros({3, 3, 4}));
    Binding bind(params, nullptr);
    ForwardContext ctx{bind};
    Var h = recurrent_backbone_forward(ctx, Var(stack_poses({&zero})), cfg);
    EXPECT_EQ(h.shape(), (Shape{1, 4 * 5}));
    for (double v : h.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(RecurrentBackbone, SingleFrameWidthIsHidden) {
    std::mt19937_64 rng(6);
    PoseBackboneConfig cfg;
    cfg.kind = PoseBackboneKind::recurrent;
    cfg.joints = 2;
    cfg.frames = 1;
    cfg.lstm_hidden = 7;
    ParameterSet params;
    RunningStats running;
    init_pose_backbone(params, running, cfg, 8);
    PoseSequence p = random_pose(rng, 2, 1);
    Binding bind(params, nullptr);
    ForwardContext ctx{bind};
    EXPECT_EQ(recurrent_backbone_forward(ctx, Var(stack_poses({&p})), cfg).shape(), (Shape{1, 7}));
    EXPECT_EQ(cfg.output_width(), 7u);
}

TEST(RecurrentBackbone, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(10);
    PoseBackboneConfig cfg;
    cfg.kind = PoseBackboneKind::recurrent;
    cfg.joints = 2;
    cfg.frames = 3;
    cfg.lstm_hidden = 3;
    ParameterSet params;
    RunningStats running;
    init_pose_backbone(params, running, cfg, 12);
    for (const auto& name : std::vector<std::string>(params.names()))
        params.set(name, random_tensor(rng, params.get(name).shape()));
    std::vector<PoseSequence> poses{random_pose(rng, 2, 3), random_pose(rng, 2, 3)};
    Var P(stack_poses({&poses[0], &poses[1]}));
    Var head(random_tensor(rng, {2, cfg.output_width()}));
    auto report = gradcheck_parameters(params, params.names(), [&](Binding& bind) {
        ForwardContext ctx{bind};
        return diff::sum_all(diff::elementwise_mul(recurrent_backbone_forward(ctx, P, cfg), head));
    });
    EXPECT_LT(report.max_rel_error, 1e-4);
}
