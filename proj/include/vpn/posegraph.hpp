#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vpn/log.hpp"
#include "vpn/params.hpp"

namespace vpn {

// ---------------------------------------------------------------------------
// Skeleton graph

struct SkeletonTopology {
    std::size_t joints = 0;
    std::vector<std::pair<std::size_t, std::size_t>> bones;

    SkeletonTopology() = default;
    SkeletonTopology(std::size_t joint_count, std::vector<std::pair<std::size_t, std::size_t>> bone_list)
        : joints(joint_count), bones(std::move(bone_list)) {
        validate();
    }

    void validate() const {
        detail::require(joints > 0, "skeleton needs at least one joint");
        for (auto [a, b] : bones) {
            detail::require(a != b, "bone (", a, ",", b, ") is a self-pair");
            detail::require(a < joints && b < joints, "bone (", a, ",", b, ") references a joint >= ", joints);
        }
        if (!connected()) warn("skeleton bone graph with " + std::to_string(joints) + " joints is not connected");
    }

    bool connected() const {
        std::vector<std::vector<std::size_t>> nbr(joints);
        for (auto [a, b] : bones) {
            nbr[a].push_back(b);
            nbr[b].push_back(a);
        }
        std::vector<char> seen(joints, 0);
        std::vector<std::size_t> stack{0};
        seen[0] = 1;
        std::size_t count = 1;
        while (!stack.empty()) {
            std::size_t j = stack.back();
            stack.pop_back();
            for (std::size_t k : nbr[j])
                if (!seen[k]) {
                    seen[k] = 1;
                    ++count;
                    stack.push_back(k);
                }
        }
        return count == joints;
    }

    bool has_bone(std::size_t a, std::size_t b) const {
        for (auto [x, y] : bones)
            if ((x == a && y == b) || (x == b && y == a)) return true;
        return false;
    }
};

/// Text format: a "joints J" line followed by one "i j" bone per line.
/// Blank lines and '#' comments are ignored.
inline SkeletonTopology parse_topology(std::istream& in, const std::string& source = "<stream>") {
    std::string line;
    std::size_t lineno = 0, joints = 0;
    bool have_header = false;
    std::vector<std::pair<std::size_t, std::size_t>> bones;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string first;
        if (!(ls >> first)) continue;
        std::string rest;
        if (!have_header) {
            long long j = -1;
            detail::require<FormatError>(first == "joints" && (ls >> j) && j > 0 && !(ls >> rest), source, ":",
                                         lineno, ": expected 'joints <count>'");
            joints = static_cast<std::size_t>(j);
            have_header = true;
            continue;
        }
        long long a = -1, b = -1;
        std::istringstream ps(line);
        detail::require<FormatError>((ps >> a >> b) && a >= 0 && b >= 0 && !(ps >> rest), source, ":", lineno,
                                     ": expected a bone 'i j' with non-negative indices");
        bones.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
    }
    detail::require<FormatError>(have_header, source, ": missing 'joints <count>' header");
    try {
        return SkeletonTopology(joints, std::move(bones));
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(source + ": " + e.what());
    }
}

inline SkeletonTopology load_topology(const std::string& path) {
    std::ifstream in(path);
    detail::require<FormatError>(bool(in), "cannot open topology file '", path, "'");
    return parse_topology(in, path);
}

inline void write_topology(std::ostream& out, const SkeletonTopology& topo) {
    out << "joints " << topo.joints << '\n';
    for (auto [a, b] : topo.bones) out << a << ' ' << b << '\n';
}

struct WeightedAdjacency {
    Tensor E;
    double alpha = 0.0;
    double beta = 0.0;
};

inline WeightedAdjacency build_adjacency(const SkeletonTopology& topo, double alpha, double beta) {
    detail::require(std::isfinite(alpha) && std::isfinite(beta), "adjacency weights must be finite");
    const std::size_t J = topo.joints;
    std::vector<double> e(J * J, 0.0);
    for (std::size_t i = 0; i < J; ++i)
        for (std::size_t j = 0; j < J; ++j)
            if (i != j) e[i * J + j] = beta;
    for (auto [a, b] : topo.bones) e[a * J + b] = e[b * J + a] = alpha;
    return {Tensor({J, J}, std::move(e)), alpha, beta};
}

/// D^{-1/2} (E + I) D^{-1/2} with D_ii the row sums of E + I.
inline Tensor normalize_adjacency(const WeightedAdjacency& adj) {
    const std::size_t J = adj.E.dim(0);
    std::vector<double> inv_sqrt(J);
    for (std::size_t i = 0; i < J; ++i) {
        double d = 1.0;
        for (std::size_t j = 0; j < J; ++j) d += adj.E[i * J + j];
        detail::require(d > 0.0, "adjacency row ", i, " has non-positive degree ", d);
        inv_sqrt[i] = 1.0 / std::sqrt(d);
    }
    std::vector<double> a(J * J);
    for (std::size_t i = 0; i < J; ++i)
        for (std::size_t j = 0; j < J; ++j)
            a[i * J + j] = inv_sqrt[i] * (adj.E[i * J + j] + (i == j ? 1.0 : 0.0)) * inv_sqrt[j];
    return Tensor({J, J}, std::move(a));
}

// ---------------------------------------------------------------------------
// Pose sequences

/// 3 × J × frames joint coordinates.
class PoseSequence {
public:
    PoseSequence() = default;
    explicit PoseSequence(Tensor coords) : coords_(std::move(coords)) {
        detail::require<ShapeError>(coords_.rank() == 3 && coords_.dim(0) == 3,
                                    "pose sequence must have shape [3,J,frames], got ", diff::to_string(coords_.shape()));
    }

    std::size_t joints() const { return coords_.dim(1); }
    std::size_t frames() const { return coords_.dim(2); }
    const Tensor& coords() const { return coords_; }

    double at(std::size_t axis, std::size_t joint, std::size_t frame) const {
        return coords_[(axis * joints() + joint) * frames() + frame];
    }

    /// 3 × J slice at one frame.
    Tensor frame(std::size_t t) const {
        detail::require(t < frames(), "frame ", t, " out of range ", frames());
        std::vector<double> v(3 * joints());
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t j = 0; j < joints(); ++j) v[a * joints() + j] = at(a, j, t);
        return Tensor({3, joints()}, std::move(v));
    }

    static PoseSequence from_frames(const std::vector<Tensor>& frames) {
        detail::require(!frames.empty(), "pose sequence needs at least one frame");
        const std::size_t J = frames[0].dim(1), T = frames.size();
        std::vector<double> v(3 * J * T);
        for (std::size_t t = 0; t < T; ++t) {
            detail::require<ShapeError>(frames[t].shape() == Shape{3, J}, "frame ", t, " has shape ",
                                        diff::to_string(frames[t].shape()), ", expected [3,", J, "]");
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t j = 0; j < J; ++j) v[(a * J + j) * T + t] = frames[t][a * J + j];
        }
        return PoseSequence(Tensor({3, J, T}, std::move(v)));
    }

private:
    Tensor coords_{Shape{3, 1, 1}, std::vector<double>(3, 0.0)};
};

/// f⁺_t = Â · G_t · W_t, where G_t is the J×3 transpose of the 3×J frame.
inline Var gcn_frame(const Var& P_t, const Var& A_hat, const Var& W_t) {
    detail::require<ShapeError>(P_t.shape().size() == 2 && P_t.shape()[0] == 3, "gcn_frame: frame must be [3,J], got ",
                                diff::to_string(P_t.shape()));
    return diff::matmul(diff::matmul(A_hat, diff::permute(P_t, {1, 0})), W_t);
}

// ---------------------------------------------------------------------------
// Backbones

enum class PoseBackboneKind { gcn, recurrent };

struct PoseBackboneConfig {
    PoseBackboneKind kind = PoseBackboneKind::gcn;
    std::size_t joints = 8;
    std::size_t frames = 20;
    std::size_t d_g = 64;
    std::array<std::size_t, 3> conv_channels{64, 64, 128};
    std::size_t lstm_hidden = 128;
    std::size_t lstm_layers = 3;

    /// Width of h*.
    std::size_t output_width() const {
        return kind == PoseBackboneKind::gcn ? joints * frames * conv_channels.back() : frames * lstm_hidden;
    }
};

inline std::string gcn_weight_name(std::size_t t) { return "pose.gcn.W" + std::to_string(t); }

inline void init_pose_backbone(ParameterSet& params, RunningStats& running, const PoseBackboneConfig& cfg,
                               std::uint64_t seed) {
    if (cfg.kind == PoseBackboneKind::gcn) {
        for (std::size_t t = 0; t < cfg.frames; ++t)
            params.add(gcn_weight_name(t), glorot_uniform({3, cfg.d_g}, 3, cfg.d_g, seed, gcn_weight_name(t)));
        params.add("pose.res.W", glorot_uniform({3, cfg.d_g}, 3, cfg.d_g, seed, "pose.res.W"));
        std::size_t ci = cfg.d_g;
        for (std::size_t k = 0; k < 3; ++k) {
            const std::size_t co = cfg.conv_channels[k];
            const std::string base = "pose.conv" + std::to_string(k);
            params.add(base + ".w", glorot_uniform({3, 3, ci, co}, 9 * ci, 9 * co, seed, base + ".w"));
            params.add(base + ".b", Tensor::zeros({co}));
            params.add(base + ".bn.gamma", Tensor::full({co}, 1.0));
            params.add(base + ".bn.beta", Tensor::zeros({co}));
            running[base + ".bn"] = diff::BatchStats{std::vector<double>(co, 0.0), std::vector<double>(co, 1.0)};
            ci = co;
        }
        return;
    }
    std::size_t in = 3 * cfg.joints;
    const std::size_t h = cfg.lstm_hidden;
    for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
        const std::string base = "pose.lstm" + std::to_string(l);
        params.add(base + ".W_ih", glorot_uniform({4 * h, in}, in, 4 * h, seed, base + ".W_ih"));
        params.add(base + ".W_hh", glorot_uniform({4 * h, h}, h, 4 * h, seed, base + ".W_hh"));
        params.add(base + ".b", Tensor::zeros({4 * h}));
        in = h;
    }
}

/// Batch of poses as [N, J, frames, 3] (joint-major, channels last).
inline Tensor stack_poses(const std::vector<const PoseSequence*>& batch) {
    detail::require(!batch.empty(), "empty pose batch");
    const std::size_t J = batch[0]->joints(), T = batch[0]->frames(), N = batch.size();
    std::vector<double> v(N * J * T * 3);
    for (std::size_t n = 0; n < N; ++n) {
        detail::require<ShapeError>(batch[n]->joints() == J && batch[n]->frames() == T, "pose batch entry ", n,
                                    " has ", batch[n]->joints(), " joints x ", batch[n]->frames(),
                                    " frames, expected ", J, " x ", T);
        for (std::size_t j = 0; j < J; ++j)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t a = 0; a < 3; ++a) v[((n * J + j) * T + t) * 3 + a] = batch[n]->at(a, j, t);
    }
    return Tensor({N, J, T, 3}, std::move(v));
}

/// GCN per frame (distinct W_t), residual projection of the raw pose, then
/// three conv3x3 + batch-norm + ReLU layers over the joints × time plane.
/// `poses` is [N, J, frames, 3]; returns h* as [N, J·frames·C3].
inline Var pose_backbone_forward(ForwardContext& ctx, const Var& poses, const Tensor& A_hat,
                                 const PoseBackboneConfig& cfg) {
    const auto& s = poses.shape();
    detail::require<ShapeError>(s.size() == 4 && s[3] == 3 && s[1] == cfg.joints,
                                "pose_backbone_forward: expected [N,", cfg.joints, ",", cfg.frames, ",3], got ",
                                diff::to_string(s));
    detail::require(s[2] == cfg.frames, "pose_backbone_forward: got ", s[2], " frames, backbone has ", cfg.frames,
                    " GCN weights");
    const std::size_t N = s[0], J = s[1], T = s[2], dg = cfg.d_g;
    const Var A(A_hat);

    // [N,J,T,3] -> [T,J,N,3] so that each frame is a contiguous J × (N·3) block.
    Var by_frame = diff::permute(poses, {2, 1, 0, 3});
    std::vector<Var> frames;
    frames.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        Var G = diff::reshape(diff::slice(by_frame, 0, t, t + 1), {J, N * 3});
        Var mixed = diff::reshape(diff::matmul(A, G), {J * N, 3});
        Var f = diff::matmul(mixed, ctx.bind(gcn_weight_name(t)));
        frames.push_back(diff::reshape(f, {J, N, 1, dg}));
    }
    Var gcn = diff::permute(diff::concat(frames, 2), {1, 0, 2, 3});

    Var residual = diff::reshape(diff::matmul(diff::reshape(poses, {N * J * T, 3}), ctx.bind("pose.res.W")),
                                 {N, J, T, dg});
    Var x = diff::add(gcn, residual);

    for (std::size_t k = 0; k < 3; ++k) {
        const std::string base = "pose.conv" + std::to_string(k);
        x = diff::conv2d(x, ctx.bind(base + ".w"), &ctx.bind(base + ".b"), {1, 1}, {1, 1});
        x = diff::relu(batch_norm_layer(ctx, base + ".bn", x));
    }
    return diff::reshape(x, {N, J * T * cfg.conv_channels.back()});
}

/// Stacked LSTM over the per-frame J·3 vectors (gate order i, f, g, o).
/// h* concatenates the top layer's outputs over time: [N, frames·h].
inline Var recurrent_backbone_forward(ForwardContext& ctx, const Var& poses, const PoseBackboneConfig& cfg) {
    const auto& s = poses.shape();
    detail::require<ShapeError>(s.size() == 4 && s[3] == 3 && s[1] == cfg.joints,
                                "recurrent_backbone_forward: expected [N,", cfg.joints, ",", cfg.frames, ",3], got ",
                                diff::to_string(s));
    detail::require(s[2] == cfg.frames, "recurrent_backbone_forward: got ", s[2], " frames, expected ", cfg.frames);
    const std::size_t N = s[0], J = s[1], T = s[2], h = cfg.lstm_hidden;

    Var by_frame = diff::reshape(diff::permute(poses, {2, 0, 1, 3}), {T, N * J * 3});
    std::vector<Var> inputs;
    for (std::size_t t = 0; t < T; ++t) inputs.push_back(diff::reshape(diff::slice(by_frame, 0, t, t + 1), {N, J * 3}));

    for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
        const std::string base = "pose.lstm" + std::to_string(l);
        const Var& W_ih = ctx.bind(base + ".W_ih");
        const Var& W_hh = ctx.bind(base + ".W_hh");
        const Var& b = ctx.bind(base + ".b");
        Var hs(Tensor::zeros({N, h}));
        Var cs(Tensor::zeros({N, h}));
        std::vector<Var> outputs;
        for (std::size_t t = 0; t < T; ++t) {
            Var gates = diff::add(diff::linear(inputs[t], W_ih, &b), diff::linear(hs, W_hh));
            Var i = diff::sigmoid(diff::slice(gates, 1, 0, h));
            Var f = diff::sigmoid(diff::slice(gates, 1, h, 2 * h));
            Var g = diff::tanh(diff::slice(gates, 1, 2 * h, 3 * h));
            Var o = diff::sigmoid(diff::slice(gates, 1, 3 * h, 4 * h));
            cs = diff::add(diff::elementwise_mul(f, cs), diff::elementwise_mul(i, g));
            hs = diff::elementwise_mul(o, diff::tanh(cs));
            outputs.push_back(hs);
        }
        inputs = std::move(outputs);
    }
    return diff::concat(inputs, 1);
}

}  // namespace vpn

namespace vpn {

/// Eight-joint upper-body-plus-leg skeleton: head, neck, right elbow, right
/// hand, left elbow, left hand, pelvis, foot.
inline SkeletonTopology default_skeleton() {
    return SkeletonTopology(8, {{0, 1}, {1, 2}, {2, 3}, {1, 4}, {4, 5}, {1, 6}, {6, 7}});
}

}  // namespace vpn
