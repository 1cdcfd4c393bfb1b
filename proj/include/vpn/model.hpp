#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "vpn/attention.hpp"
#include "vpn/embedding.hpp"
#include "vpn/posegraph.hpp"

namespace vpn {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
    std::size_t joints = 8;
    std::size_t t_p = 20;
    std::size_t t_c = 4;
    std::size_t m = 7;
    std::size_t n = 7;
    std::size_t c = 32;
    std::size_t d_g = 64;
    std::size_t d_a = 128;
    std::size_t D_e = 256;
    double alpha = 5.0;
    double beta = 2.0;
    double lambda1 = 0.8;
    double lambda2 = 1e-5;
    double dropout_rate = 0.3;
    PoseBackboneKind pose_backbone = PoseBackboneKind::gcn;
    bool attention_enabled = true;
    bool coupler_enabled = true;
    bool embedding_enabled = true;
    EmbeddingLossKind embedding_loss = EmbeddingLossKind::ne;
    std::size_t class_count = 8;
    std::size_t visual_hidden = 8;
    std::array<std::size_t, 3> pose_conv_channels{64, 64, 128};
    std::size_t lstm_hidden = 128;
    std::size_t lstm_layers = 3;
    double bn_momentum = 0.9;
    double bn_eps = 1e-5;
    double norm_eps = 1e-12;
    double kl_floor = 1e-8;
    double ce_floor = 1e-12;
    std::vector<std::pair<std::size_t, std::size_t>> bones = default_skeleton().bones;

    // Visual stub geometry: stride 2 in time then 2×2 pooling; stride 8 in space.
    std::size_t video_frames() const { return 4 * t_c; }
    std::size_t video_height() const { return 8 * m; }
    std::size_t video_width() const { return 8 * n; }

    /// Channels reaching the classifier.
    std::size_t classifier_width() const { return attention_enabled && !coupler_enabled ? 2 * c : c; }
    std::size_t D_v() const { return m * n * c; }

    /// Weight of L_C in the objective; without the embedding the objective
    /// is L_C + λ2·L_a.
    double effective_lambda1() const { return embedding_enabled ? lambda1 : 1.0; }

    PoseBackboneConfig pose_config() const {
        PoseBackboneConfig p;
        p.kind = pose_backbone;
        p.joints = joints;
        p.frames = t_p;
        p.d_g = d_g;
        p.conv_channels = pose_conv_channels;
        p.lstm_hidden = lstm_hidden;
        p.lstm_layers = lstm_layers;
        return p;
    }
    AttentionGeometry attention_geometry() const { return {t_c, m, n}; }
    SkeletonTopology skeleton() const { return SkeletonTopology(joints, bones); }

    void validate() const {
        for (auto [name, v] : {std::pair{"joints", joints}, {"t_p", t_p}, {"t_c", t_c}, {"m", m}, {"n", n}, {"c", c},
                               {"d_g", d_g}, {"d_a", d_a}, {"D_e", D_e}, {"class_count", class_count},
                               {"visual_hidden", visual_hidden}, {"lstm_hidden", lstm_hidden},
                               {"lstm_layers", lstm_layers}})
            detail::require(v > 0, "model.", name, " must be positive");
        for (auto ch : pose_conv_channels) detail::require(ch > 0, "model.pose_conv_channels must be positive");
        detail::require(lambda1 >= 0.0 && lambda1 <= 1.0, "model.lambda1 must lie in [0,1], got ", lambda1);
        detail::require(lambda2 >= 0.0, "model.lambda2 must be non-negative, got ", lambda2);
        detail::require(dropout_rate >= 0.0 && dropout_rate < 1.0, "model.dropout_rate must lie in [0,1)");
        detail::require(std::isfinite(alpha) && std::isfinite(beta), "model.alpha and model.beta must be finite");
        detail::require(!embedding_enabled || attention_enabled,
                        "model.embedding_enabled needs model.attention_enabled (z1 comes from the attention head)");
        detail::require(bn_momentum >= 0.0 && bn_momentum <= 1.0, "model.bn_momentum must lie in [0,1]");
        detail::require(bn_eps > 0.0 && norm_eps > 0.0 && kl_floor > 0.0 && ce_floor > 0.0,
                        "model epsilons must be positive");
        skeleton();
    }
};

inline const char* to_string(PoseBackboneKind k) { return k == PoseBackboneKind::gcn ? "gcn" : "recurrent"; }

inline PoseBackboneKind parse_pose_backbone(const std::string& s) {
    if (s == "gcn") return PoseBackboneKind::gcn;
    if (s == "recurrent") return PoseBackboneKind::recurrent;
    throw Error("unknown pose backbone '" + s + "' (expected gcn or recurrent)");
}

inline json to_json(const ModelConfig& c) {
    json bones = json::array();
    for (auto [a, b] : c.bones) bones.push_back({a, b});
    return json{{"joints", c.joints},
                {"t_p", c.t_p},
                {"t_c", c.t_c},
                {"m", c.m},
                {"n", c.n},
                {"c", c.c},
                {"d_g", c.d_g},
                {"d_a", c.d_a},
                {"D_e", c.D_e},
                {"alpha", c.alpha},
                {"beta", c.beta},
                {"lambda1", c.lambda1},
                {"lambda2", c.lambda2},
                {"dropout_rate", c.dropout_rate},
                {"pose_backbone", to_string(c.pose_backbone)},
                {"attention_enabled", c.attention_enabled},
                {"coupler_enabled", c.coupler_enabled},
                {"embedding_enabled", c.embedding_enabled},
                {"embedding_loss", to_string(c.embedding_loss)},
                {"class_count", c.class_count},
                {"visual_hidden", c.visual_hidden},
                {"pose_conv_channels", c.pose_conv_channels},
                {"lstm_hidden", c.lstm_hidden},
                {"lstm_layers", c.lstm_layers},
                {"bn_momentum", c.bn_momentum},
                {"bn_eps", c.bn_eps},
                {"norm_eps", c.norm_eps},
                {"kl_floor", c.kl_floor},
                {"ce_floor", c.ce_floor},
                {"bones", bones}};
}

namespace detail {
template <class T>
T json_get(const json& j, const std::string& path) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw Error("config key '" + path + "' has the wrong type: " + j.dump());
    }
}
}  // namespace detail

/// Fields absent from `j` keep their defaults; unknown keys are rejected.
inline ModelConfig model_config_from_json(const json& j, const std::string& prefix = "model.") {
    detail::require(j.is_object(), "'", prefix, "' must be an object");
    ModelConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        const std::string path = prefix + k;
        auto sz = [&] {
            detail::require(v.is_number_integer() && v.get<long long>() >= 0, "config key '", path,
                            "' must be a non-negative integer");
            return v.get<std::size_t>();
        };
        auto num = [&] {
            detail::require(v.is_number(), "config key '", path, "' must be a number");
            return v.get<double>();
        };
        auto flag = [&] {
            detail::require(v.is_boolean(), "config key '", path, "' must be true or false");
            return v.get<bool>();
        };
        if (k == "joints") c.joints = sz();
        else if (k == "t_p") c.t_p = sz();
        else if (k == "t_c") c.t_c = sz();
        else if (k == "m") c.m = sz();
        else if (k == "n") c.n = sz();
        else if (k == "c") c.c = sz();
        else if (k == "d_g") c.d_g = sz();
        else if (k == "d_a") c.d_a = sz();
        else if (k == "D_e") c.D_e = sz();
        else if (k == "alpha") c.alpha = num();
        else if (k == "beta") c.beta = num();
        else if (k == "lambda1") c.lambda1 = num();
        else if (k == "lambda2") c.lambda2 = num();
        else if (k == "dropout_rate") c.dropout_rate = num();
        else if (k == "pose_backbone") c.pose_backbone = parse_pose_backbone(detail::json_get<std::string>(v, path));
        else if (k == "attention_enabled") c.attention_enabled = flag();
        else if (k == "coupler_enabled") c.coupler_enabled = flag();
        else if (k == "embedding_enabled") c.embedding_enabled = flag();
        else if (k == "embedding_loss") c.embedding_loss = parse_embedding_loss(detail::json_get<std::string>(v, path));
        else if (k == "class_count") c.class_count = sz();
        else if (k == "visual_hidden") c.visual_hidden = sz();
        else if (k == "pose_conv_channels") c.pose_conv_channels = detail::json_get<std::array<std::size_t, 3>>(v, path);
        else if (k == "lstm_hidden") c.lstm_hidden = sz();
        else if (k == "lstm_layers") c.lstm_layers = sz();
        else if (k == "bn_momentum") c.bn_momentum = num();
        else if (k == "bn_eps") c.bn_eps = num();
        else if (k == "norm_eps") c.norm_eps = num();
        else if (k == "kl_floor") c.kl_floor = num();
        else if (k == "ce_floor") c.ce_floor = num();
        else if (k == "bones") c.bones = detail::json_get<std::vector<std::pair<std::size_t, std::size_t>>>(v, path);
        else throw Error("unknown config key '" + path + "'");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Model state

struct Model {
    ModelConfig config;
    ParameterSet params;
    RunningStats running;
    Tensor A_hat;  ///< normalized skeleton adjacency (constant)
};

inline Tensor model_adjacency(const ModelConfig& cfg) {
    return normalize_adjacency(build_adjacency(cfg.skeleton(), cfg.alpha, cfg.beta));
}

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model model{cfg, {}, {}, model_adjacency(cfg)};
    auto& p = model.params;
    const std::size_t c1 = cfg.visual_hidden;
    std::size_t ci = 3;
    for (const auto& [base, co] : {std::pair<std::string, std::size_t>{"vis.conv1", c1}, {"vis.conv2", cfg.c}}) {
        p.add(base + ".w", glorot_uniform({3, 3, 3, ci, co}, 27 * ci, 27 * co, seed, base + ".w"));
        p.add(base + ".b", Tensor::zeros({co}));
        p.add(base + ".bn.gamma", Tensor::full({co}, 1.0));
        p.add(base + ".bn.beta", Tensor::zeros({co}));
        model.running[base + ".bn"] = diff::BatchStats{std::vector<double>(co, 0.0), std::vector<double>(co, 1.0)};
        ci = co;
    }
    if (cfg.attention_enabled) {
        const auto pose = cfg.pose_config();
        init_pose_backbone(p, model.running, pose, seed);
        init_attention(p, pose.output_width(), cfg.d_a, cfg.attention_geometry(), seed);
        init_embedding(p, cfg.D_v(), cfg.m * cfg.n, cfg.D_e, seed);
    }
    const std::size_t w = cfg.classifier_width();
    p.add("cls.W", glorot_uniform({cfg.class_count, w}, w, cfg.class_count, seed, "cls.W"));
    p.add("cls.b", Tensor::zeros({cfg.class_count}));
    return model;
}

/// Parameter groups used by gradient reports.
inline std::string parameter_group(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("vis.")) return "visual_backbone";
    if (starts("pose.gcn.") || starts("pose.res.")) return "gcn";
    if (starts("pose.conv")) return "pose_conv";
    if (starts("pose.lstm")) return "lstm";
    if (starts("att.")) return "attention";
    if (starts("emb.")) return "embedding";
    if (starts("cls.")) return "classifier";
    return "other";
}

// ---------------------------------------------------------------------------
// Forward pass

/// conv3d(3→c1, stride 2) → BN → ReLU → 2×2×2 average pool → conv3d(c1→c,
/// stride 1×2×2) → BN → ReLU. video [N, T, H, W, 3] → f [N, T/4, H/8, W/8, c].
inline Var visual_backbone_forward(ForwardContext& ctx, const Var& video) {
    Binding& bind = ctx.bind;
    const auto& s = video.shape();
    detail::require<ShapeError>(s.size() == 5 && s[4] == 3, "visual_backbone_forward: expects [N,T,H,W,3], got ",
                                diff::to_string(s));
    for (std::size_t d = 1; d <= 3; ++d)
        detail::require<ShapeError>(s[d] % (d == 1 ? 4 : 8) == 0, "visual_backbone_forward: extents ",
                                    diff::to_string(s), " must be multiples of 4 (time) and 8 (space)");
    Var x = diff::conv3d(video, bind("vis.conv1.w"), &bind("vis.conv1.b"), {2, 2, 2}, {1, 1, 1});
    x = diff::avg_pool3d(diff::relu(batch_norm_layer(ctx, "vis.conv1.bn", x)), {2, 2, 2});
    x = diff::conv3d(x, bind("vis.conv2.w"), &bind("vis.conv2.b"), {1, 2, 2}, {1, 1, 1});
    return diff::relu(batch_norm_layer(ctx, "vis.conv2.bn", x));
}

struct ForwardOutputs {
    Var f;
    Var f_prime;
    Var h;
    LatentAttentionVectors z;
    CoupledAttention att;
    std::optional<EmbeddedPair> pair;
    Var L_e;  ///< per-sample embedding loss [N] when the embedding is enabled
    Var logits;
    Var probs;
};

/// Global average pooling → dropout (training only) → affine → logits.
inline Var classifier_logits(ForwardContext& ctx, const ModelConfig& cfg, const Var& f_prime) {
    const auto& s = f_prime.shape();
    detail::require<ShapeError>(s.size() == 5 && s[4] == cfg.classifier_width(), "classify: feature map ",
                                diff::to_string(s), " does not have ", cfg.classifier_width(), " channels");
    const std::size_t N = s[0], C = s[4];
    Var pooled = diff::mean_axis(diff::reshape(f_prime, {N, s[1] * s[2] * s[3], C}), 1);
    if (ctx.training) pooled = diff::dropout(pooled, cfg.dropout_rate, ctx.dropout_rng);
    return diff::linear(pooled, ctx.bind("cls.W"), &ctx.bind("cls.b"));
}

inline Var classify(ForwardContext& ctx, const ModelConfig& cfg, const Var& f_prime) {
    return diff::softmax_lastdim(classifier_logits(ctx, cfg, f_prime));
}

inline Var pose_features(ForwardContext& ctx, const Model& model, const Var& poses) {
    const auto pose = model.config.pose_config();
    return pose.kind == PoseBackboneKind::gcn ? pose_backbone_forward(ctx, poses, model.A_hat, pose)
                                              : recurrent_backbone_forward(ctx, poses, pose);
}

/// Pose backbone → attention → (coupled or dissociated) modulation →
/// embedding pair → classifier. `f` is [N, t_c, m, n, c]; poses [N, J, t_p, 3].
inline ForwardOutputs vpn_forward(ForwardContext& ctx, const Model& model, const Var& f, const Var& poses) {
    const ModelConfig& cfg = model.config;
    ForwardOutputs out;
    out.f = f;
    const auto& s = f.shape();
    detail::require<ShapeError>(s.size() == 5 && s[1] == cfg.t_c && s[2] == cfg.m && s[3] == cfg.n && s[4] == cfg.c,
                                "vpn_forward: feature map ", diff::to_string(s), " does not match [N,", cfg.t_c, ",",
                                cfg.m, ",", cfg.n, ",", cfg.c, "]");
    if (!cfg.attention_enabled) {
        out.f_prime = f;
    } else {
        out.h = pose_features(ctx, model, poses);
        out.z = latent_vectors(ctx.bind, out.h);
        out.att = coupled_attention(out.z, cfg.attention_geometry());
        out.f_prime = cfg.coupler_enabled ? modulate(f, out.att.A_ST) : dissociated_modulate(f, out.att.A_S, out.att.A_T);
        if (cfg.embedding_enabled) {
            out.pair = project(ctx.bind, spatial_pool(f), out.z.z1, cfg.norm_eps);
            out.L_e = embedding_loss(*out.pair, cfg.embedding_loss, cfg.kl_floor);
        }
    }
    out.logits = classifier_logits(ctx, cfg, out.f_prime);
    out.probs = diff::softmax_lastdim(out.logits);
    return out;
}

inline ForwardOutputs model_forward(ForwardContext& ctx, const Model& model, const Var& video, const Var& poses) {
    const ModelConfig& cfg = model.config;
    const auto& s = video.shape();
    detail::require<ShapeError>(s.size() == 5 && s[1] == cfg.video_frames() && s[2] == cfg.video_height() &&
                                    s[3] == cfg.video_width(),
                                "model_forward: video ", diff::to_string(s), " does not match training extent [N,",
                                cfg.video_frames(), ",", cfg.video_height(), ",", cfg.video_width(), ",3]");
    return vpn_forward(ctx, model, visual_backbone_forward(ctx, video), poses);
}

// ---------------------------------------------------------------------------
// Objective

/// Σ A_S + Σ (1 − A_T)² per sample, [N].
inline Var attention_regularizer(const Var& A_S, const Var& A_T) {
    const std::size_t N = A_S.shape()[0];
    Var spatial = diff::sum_axis(diff::reshape(A_S, {N, A_S.value().size() / N}), 1);
    Var gap = diff::sub(Var(Tensor::full(A_T.shape(), 1.0)), A_T);
    return diff::add(spatial, diff::sum_axis(diff::elementwise_mul(gap, gap), 1));
}

/// −log max(p[label], floor) per sample, [N].
inline Var cross_entropy(const Var& probs, const std::vector<std::size_t>& labels, double floor) {
    return diff::scale(diff::log(diff::clamp_min(diff::pick(probs, labels), floor)), -1.0);
}

/// L = λ1·L_C + (1−λ1)·L_e + λ2·L_a on scalars.
inline double total_loss(double L_C, double L_e, double L_a, double lambda1, double lambda2) {
    return lambda1 * L_C + (1.0 - lambda1) * L_e + lambda2 * L_a;
}

inline Var total_loss(const Var& L_C, const Var& L_e, const Var& L_a, double lambda1, double lambda2) {
    detail::require(lambda1 >= 0.0 && lambda1 <= 1.0, "total_loss: lambda1 must lie in [0,1], got ", lambda1);
    return diff::add(diff::add(diff::scale(L_C, lambda1), diff::scale(L_e, 1.0 - lambda1)), diff::scale(L_a, lambda2));
}

struct LossTerms {
    Var L, L_C, L_e, L_a;  ///< batch means (scalars)
    double lambda1 = 1.0, lambda2 = 0.0;
};

inline Var batch_mean(const Var& per_sample) {
    return diff::scale(diff::sum_all(per_sample), 1.0 / static_cast<double>(per_sample.value().size()));
}

inline LossTerms objective(const ModelConfig& cfg, const ForwardOutputs& out, const std::vector<std::size_t>& labels) {
    LossTerms t;
    t.lambda1 = cfg.effective_lambda1();
    t.lambda2 = cfg.lambda2;
    t.L_C = batch_mean(cross_entropy(out.probs, labels, cfg.ce_floor));
    t.L_e = cfg.embedding_enabled ? batch_mean(out.L_e) : Var(Tensor::scalar(0.0));
    t.L_a = cfg.attention_enabled ? batch_mean(attention_regularizer(out.att.A_S, out.att.A_T))
                                  : Var(Tensor::scalar(0.0));
    t.L = total_loss(t.L_C, t.L_e, t.L_a, t.lambda1, t.lambda2);
    return t;
}

// ---------------------------------------------------------------------------
// Fully convolutional inference

/// Runs the backbone at the video's full spatial extent, modulates with A_S
/// resized to that grid, classifies every stride-1 m×n window and returns
/// the renormalized elementwise maximum of the window softmax scores
/// (a single window is returned unchanged). video [1, T, H, W, 3].
inline Tensor fully_convolutional_inference(const Model& model, const Tensor& video, const Tensor& poses) {
    const ModelConfig& cfg = model.config;
    const auto& s = video.shape();
    detail::require<ShapeError>(s.size() == 5 && s[0] == 1 && s[4] == 3 && s[1] == cfg.video_frames(),
                                "fully_convolutional_inference: expects one video [1,", cfg.video_frames(),
                                ",H,W,3], got ", diff::to_string(s));
    detail::require(s[2] >= cfg.video_height() && s[3] >= cfg.video_width(), "fully_convolutional_inference: input ",
                    s[2], "x", s[3], " is smaller than the training extent ", cfg.video_height(), "x",
                    cfg.video_width());
    Binding bind(model.params, nullptr);
    ForwardContext ctx{bind, false, nullptr, &model.running, nullptr, cfg.bn_eps};
    Var f = visual_backbone_forward(ctx, Var(video));
    const std::size_t M = f.shape()[2], Nn = f.shape()[3];

    Var f_prime = f;
    if (cfg.attention_enabled) {
        Var h = pose_features(ctx, model, Var(poses));
        auto z = latent_vectors(bind, h);
        auto [A_S, A_T] = attention_weights(z, cfg.attention_geometry());
        Var S = resize_spatial(A_S, M, Nn);
        f_prime = cfg.coupler_enabled ? modulate(f, couple(S, A_T)) : dissociated_modulate(f, S, A_T);
    }
    if (M == cfg.m && Nn == cfg.n) return classify(ctx, cfg, f_prime).value();

    const std::size_t K = cfg.class_count;
    std::vector<double> best(K, 0.0);
    for (std::size_t i = 0; i + cfg.m <= M; ++i)
        for (std::size_t j = 0; j + cfg.n <= Nn; ++j) {
            Var window = diff::slice(diff::slice(f_prime, 2, i, i + cfg.m), 3, j, j + cfg.n);
            Tensor p = classify(ctx, cfg, window).value();
            for (std::size_t k = 0; k < K; ++k) best[k] = std::max(best[k], p[k]);
        }
    double total = 0.0;
    for (double v : best) total += v;
    for (auto& v : best) v /= total;
    return Tensor({1, K}, std::move(best));
}

/// Lowest index among the maxima.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// ---------------------------------------------------------------------------
// Checkpoints: "VPNC", u32 version, u64-length config JSON, named tensors as
// little-endian doubles, then batch-norm running statistics.

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    o.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& o, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    o.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& o, double v) { put_u64(o, std::bit_cast<std::uint64_t>(v)); }
inline void put_str(std::ostream& o, const std::string& s) {
    put_u64(o, s.size());
    o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Reader {
    std::istream& in;
    std::string source;
    std::size_t offset = 0;
    void raw(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        require<FormatError>(static_cast<std::size_t>(in.gcount()) == n, source, ": truncated at offset ", offset);
        offset += n;
    }
    std::uint64_t u(int bytes) {
        unsigned char b[8] = {};
        raw(b, bytes);
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
    std::uint64_t u64() { return u(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t limit = std::size_t(1) << 28) {
        const auto n = u64();
        require<FormatError>(n <= limit, source, ": implausible string length ", n);
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& out, const Model& model) {
    out.write("VPNC", 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_str(out, to_json(model.config).dump());
    detail::put_u64(out, model.params.size());
    for (const auto& name : model.params.names()) {
        const Tensor& t = model.params.get(name);
        detail::put_str(out, name);
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::put_u64(out, d);
        for (double v : t.values()) detail::put_f64(out, v);
    }
    detail::put_u64(out, model.running.size());
    for (const auto& [name, stats] : model.running) {
        detail::put_str(out, name);
        detail::put_u64(out, stats.mean.size());
        for (double v : stats.mean) detail::put_f64(out, v);
        for (double v : stats.var) detail::put_f64(out, v);
    }
}

inline void save_checkpoint(const std::string& path, const Model& model) {
    std::ofstream out(path, std::ios::binary);
    detail::require(bool(out), "cannot write checkpoint '", path, "'");
    save_checkpoint(out, model);
    detail::require(bool(out), "failed writing checkpoint '", path, "'");
}

inline Model load_checkpoint(std::istream& in, const std::string& source = "<checkpoint>") {
    detail::Reader r{in, source};
    char magic[4];
    r.raw(magic, 4);
    detail::require<FormatError>(std::memcmp(magic, "VPNC", 4) == 0, source, ": not a checkpoint (bad magic)");
    const auto version = r.u32();
    detail::require<FormatError>(version == kCheckpointVersion, source, ": unsupported checkpoint version ", version);
    json cfg_json;
    try {
        cfg_json = json::parse(r.str());
    } catch (const json::exception& e) {
        throw FormatError(source + ": corrupt config block: " + e.what());
    }
    Model model{model_config_from_json(cfg_json), {}, {}, {}};
    model.A_hat = model_adjacency(model.config);
    const auto count = r.u64();
    for (std::uint64_t p = 0; p < count; ++p) {
        std::string name = r.str(4096);
        const auto rank = r.u32();
        detail::require<FormatError>(rank <= 8, source, ": tensor '", name, "' has implausible rank ", rank);
        Shape shape(rank);
        for (auto& d : shape) d = r.u64();
        const std::size_t n = diff::numel(shape);
        detail::require<FormatError>(n <= (std::size_t(1) << 32), source, ": tensor '", name, "' is implausibly large");
        std::vector<double> v(n);
        for (auto& x : v) x = r.f64();
        model.params.add(name, Tensor(std::move(shape), std::move(v)));
    }
    const auto stats = r.u64();
    for (std::uint64_t s = 0; s < stats; ++s) {
        std::string name = r.str(4096);
        const auto C = r.u64();
        detail::require<FormatError>(C <= (std::size_t(1) << 24), source, ": implausible channel count ", C);
        diff::BatchStats b{std::vector<double>(C), std::vector<double>(C)};
        for (auto& x : b.mean) x = r.f64();
        for (auto& x : b.var) x = r.f64();
        model.running[name] = std::move(b);
    }
    // The parameter list must be exactly what the config implies.
    Model fresh = init_model(model.config, 0);
    detail::require<FormatError>(fresh.params.names().size() == model.params.size(), source,
                                 ": parameter count does not match the stored config");
    for (const auto& name : fresh.params.names()) {
        detail::require<FormatError>(model.params.contains(name), source, ": missing parameter '", name, "'");
        detail::require<FormatError>(model.params.get(name).shape() == fresh.params.get(name).shape(), source,
                                     ": parameter '", name, "' has the wrong shape");
    }
    for (const auto& [name, _] : fresh.running)
        detail::require<FormatError>(model.running.count(name), source, ": missing running statistics '", name, "'");
    return model;
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::require<FormatError>(bool(in), "cannot open checkpoint '", path, "'");
    return load_checkpoint(in, path);
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

/// Smallest configuration exercising every component: J=4, t_p=3, t_c=2,
/// m=n=2, c=3, D_e=4 with narrow hidden widths.
inline ModelConfig gradcheck_toy_config(PoseBackboneKind kind = PoseBackboneKind::gcn,
                                        EmbeddingLossKind loss = EmbeddingLossKind::ne) {
    ModelConfig c;
    c.joints = 4;
    c.bones = {{0, 1}, {1, 2}, {1, 3}};
    c.t_p = 3;
    c.t_c = 2;
    c.m = c.n = 2;
    c.c = 3;
    c.D_e = 4;
    c.d_g = 4;
    c.pose_conv_channels = {4, 4, 8};
    c.d_a = 4;
    c.lstm_hidden = 4;
    c.visual_hidden = 2;
    c.class_count = 3;
    c.pose_backbone = kind;
    c.embedding_loss = loss;
    return c;
}

struct ModelGradcheckReport {
    double max_rel_error = 0.0;
    std::map<std::string, double> per_group;
    std::size_t coordinates = 0;
    std::string worst_parameter;
};

/// Central differences of the full training objective (batch-norm batch
/// statistics, a fixed dropout mask) against the tape gradient.
inline ModelGradcheckReport model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch = 2,
                                            double step = 1e-6) {
    Model model = init_model(cfg, seed);
    std::mt19937_64 rng(mix_seed(seed, 7));
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    // Non-zero biases keep every parameter's gradient informative. The small
    // default step keeps central differences clear of ReLU kinks.
    for (const auto& name : model.params.names())
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
            std::vector<double> v(model.params.get(name).size());
            for (auto& x : v) x = 0.1 * u(rng);
            model.params.set(name, Tensor(model.params.get(name).shape(), std::move(v)));
        }
    const Shape vshape{batch, cfg.video_frames(), cfg.video_height(), cfg.video_width(), 3};
    std::vector<double> video(diff::numel(vshape));
    for (auto& x : video) x = u(rng) + 0.5;
    std::vector<double> pose(batch * cfg.joints * cfg.t_p * 3);
    for (auto& x : pose) x = 2.0 * u(rng);
    std::vector<std::size_t> labels(batch);
    for (std::size_t i = 0; i < batch; ++i) labels[i] = i % cfg.class_count;
    const Var V(Tensor(vshape, std::move(video)));
    const Var P(Tensor({batch, cfg.joints, cfg.t_p, 3}, std::move(pose)));

    auto report = gradcheck_parameters(
        model.params, model.params.names(),
        [&](Binding& bind) {
            std::mt19937_64 drop(mix_seed(seed, 11));
            ForwardContext ctx{bind, true, &drop, nullptr, nullptr, cfg.bn_eps};
            auto out = model_forward(ctx, model, V, P);
            return objective(cfg, out, labels).L;
        },
        step);
    ModelGradcheckReport r;
    r.max_rel_error = report.max_rel_error;
    r.coordinates = report.coordinates;
    r.worst_parameter = model.params.names()[report.worst_param];
    for (std::size_t i = 0; i < report.per_param.size(); ++i) {
        auto& g = r.per_group[parameter_group(model.params.names()[i])];
        g = std::max(g, report.per_param[i]);
    }
    return r;
}

}  // namespace vpn
