#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vpn/log.hpp"
#include "vpn/params.hpp"
#include "vpn/posegraph.hpp"

namespace vpn {

/// One clip: video [T,H,W,3] in [0,1] and the full-length pose sequence.
struct SampleRecord {
    Tensor video;
    PoseSequence poses;
    std::size_t label = 0;
    std::string id;
};

using Dataset = std::vector<SampleRecord>;

// ---------------------------------------------------------------------------
// Synthetic task

enum class Motion { raise, lateral, wave, nod, push };

/// One joint group moving with a template during a window of the clip,
/// expressed as fractions of the clip length.
struct MotionSpec {
    std::vector<std::size_t> joints;
    Motion kind = Motion::raise;
    double start = 0.0, end = 1.0;
    double amplitude = 0.35;
};

struct ActionClass {
    std::string name;
    std::vector<MotionSpec> motions;
    /// When set, the class is the frame-reversed copy of this class.
    std::optional<std::size_t> reverse_of;
};

struct SyntheticTaskSpec {
    std::size_t class_count = 8;
    std::size_t joints = 8;
    std::size_t frames = 16;
    std::size_t height = 56;
    std::size_t width = 56;
    std::size_t samples_per_class = 10;
    double noise = 0.02;
    std::uint64_t seed = 1;

    void validate() const {
        detail::require(class_count > 0, "synthetic task needs at least one class");
        detail::require(class_count <= 8, "synthetic task defines at most 8 classes, got ", class_count);
        detail::require(joints == 8, "synthetic task is defined on the 8-joint default skeleton, got ", joints, " joints");
        detail::require(frames >= 2, "synthetic clips need at least 2 frames");
        detail::require(height >= 4 && width >= 4, "synthetic frames must be at least 4x4 pixels");
        detail::require(noise >= 0.0 && std::isfinite(noise), "noise level must be finite and >= 0");
    }
};

/// Joint order follows default_skeleton(): pelvis, chest, neck, head, then
/// elbow and hand for the left and right arm.
inline const std::array<std::array<double, 3>, 8>& rest_pose() {
    static const std::array<std::array<double, 3>, 8> p{{{0.0, -0.55, 0.0},
                                                         {0.0, -0.05, 0.0},
                                                         {0.0, 0.2, 0.0},
                                                         {0.0, 0.45, 0.0},
                                                         {-0.3, -0.05, 0.0},
                                                         {-0.6, -0.05, 0.0},
                                                         {0.3, -0.05, 0.0},
                                                         {0.6, -0.05, 0.0}}};
    return p;
}

/// The eight action classes, in label order. Classes 2 and 3 hold the same
/// frames in reversed order; classes 4 and 5 differ only in the head joint.
/// Pushes move along z, which the renderer drops, so classes 2, 3, 6 and 7
/// look alike on video and are told apart only by their poses.
inline const std::vector<ActionClass>& action_classes() {
    static const std::vector<ActionClass> classes{
        {"raise_left", {{{4, 5}, Motion::raise}}, {}},
        {"raise_right", {{{6, 7}, Motion::raise}}, {}},
        {"push_left_then_right", {{{5}, Motion::push, 0.0, 0.5}, {{7}, Motion::push, 0.5, 1.0}}, {}},
        {"push_right_then_left", {}, 2},
        {"wave_right", {{{7}, Motion::wave, 0.0, 1.0, 0.2}}, {}},
        {"wave_right_nod", {{{7}, Motion::wave, 0.0, 1.0, 0.2}, {{3}, Motion::nod, 0.0, 1.0, 0.12}}, {}},
        {"push_then_bow", {{{7}, Motion::push, 0.0, 0.5}, {{2, 3}, Motion::push, 0.5, 1.0, 0.25}}, {}},
        {"bow_then_push", {}, 6},
    };
    return classes;
}

inline std::pair<std::size_t, std::size_t> coupler_pair() { return {2, 3}; }
inline std::pair<std::size_t, std::size_t> fine_grained_pair() { return {4, 5}; }

namespace detail {

/// Displacement (dx, dy, dz) of a template at clip phase s in [0,1].
inline std::array<double, 3> motion_offset(const MotionSpec& m, double s) {
    if (s < m.start || s > m.end || m.end <= m.start) return {0.0, 0.0, 0.0};
    const double u = (s - m.start) / (m.end - m.start);
    const double pi = std::numbers::pi;
    const double envelope = std::sin(pi * u);
    switch (m.kind) {
        case Motion::raise: return {0.0, m.amplitude * envelope, 0.0};
        case Motion::lateral: return {-m.amplitude * envelope, 0.0, 0.0};
        case Motion::wave: return {m.amplitude * std::sin(4.0 * pi * u) * envelope, 0.5 * m.amplitude * envelope, 0.0};
        case Motion::nod: return {0.0, -m.amplitude * std::sin(2.0 * pi * u), 0.0};
        case Motion::push: return {0.0, 0.0, -m.amplitude * envelope};
    }
    return {0.0, 0.0, 0.0};
}

/// Noise-free trajectory of a class as a [3, 8, T] pose sequence.
inline std::vector<double> class_template(std::size_t label, std::size_t T) {
    const auto& cls = action_classes()[label];
    if (cls.reverse_of) {
        auto fwd = class_template(*cls.reverse_of, T);
        std::vector<double> rev(fwd.size());
        for (std::size_t r = 0; r < 3 * 8; ++r)
            for (std::size_t t = 0; t < T; ++t) rev[r * T + t] = fwd[r * T + (T - 1 - t)];
        return rev;
    }
    std::vector<double> v(3 * 8 * T);
    for (std::size_t t = 0; t < T; ++t) {
        const double s = static_cast<double>(t) / static_cast<double>(T - 1);
        for (std::size_t j = 0; j < 8; ++j)
            for (std::size_t a = 0; a < 3; ++a) v[(a * 8 + j) * T + t] = rest_pose()[j][a];
        for (const auto& m : cls.motions) {
            const auto d = motion_offset(m, s);
            for (auto j : m.joints)
                for (std::size_t a = 0; a < 3; ++a) v[(a * 8 + j) * T + t] += d[a];
        }
    }
    return v;
}

}  // namespace detail

struct RenderStats {
    std::size_t clamped = 0;
};

/// Fixed colour of joint j.
inline std::array<double, 3> joint_color(std::size_t j) {
    static const std::array<std::array<double, 3>, 8> palette{{{1.0, 0.2, 0.2},
                                                               {0.2, 1.0, 0.2},
                                                               {0.2, 0.2, 1.0},
                                                               {1.0, 1.0, 0.2},
                                                               {1.0, 0.2, 1.0},
                                                               {0.2, 1.0, 1.0},
                                                               {1.0, 0.6, 0.2},
                                                               {0.6, 0.2, 1.0}}};
    return palette[j % palette.size()];
}

constexpr double kBlobStd = 1.5;

/// Draws one frame of joints in the world box [-1,1]^3 into `out`
/// ([H,W,3], zero-initialized). x maps to columns, y up maps to rows
/// downward; z is not visible. Pixel (r, c) covers [r, r+1) × [c, c+1), so the
/// world origin lands at (H/2, W/2). Returns the number of clamped joints.
inline std::size_t render_frame(const std::vector<std::array<double, 3>>& joints, std::size_t H, std::size_t W,
                                double* out) {
    const double inv2s2 = 1.0 / (2.0 * kBlobStd * kBlobStd);
    std::size_t clamped = 0;
    for (std::size_t j = 0; j < joints.size(); ++j) {
        double x = joints[j][0], y = joints[j][1];
        if (std::abs(x) > 1.0 || std::abs(y) > 1.0 || std::abs(joints[j][2]) > 1.0) {
            ++clamped;
            x = std::clamp(x, -1.0, 1.0);
            y = std::clamp(y, -1.0, 1.0);
        }
        const double col = (x + 1.0) * 0.5 * static_cast<double>(W);
        const double row = (1.0 - y) * 0.5 * static_cast<double>(H);
        const auto color = joint_color(j);
        const long r0 = std::max(0L, static_cast<long>(row - 6 * kBlobStd));
        const long r1 = std::min(static_cast<long>(H) - 1, static_cast<long>(row + 6 * kBlobStd));
        const long c0 = std::max(0L, static_cast<long>(col - 6 * kBlobStd));
        const long c1 = std::min(static_cast<long>(W) - 1, static_cast<long>(col + 6 * kBlobStd));
        for (long r = r0; r <= r1; ++r)
            for (long c = c0; c <= c1; ++c) {
                const double dr = r + 0.5 - row, dc = c + 0.5 - col;
                const double g = std::exp(-(dr * dr + dc * dc) * inv2s2);
                double* px = out + (r * W + c) * 3;
                for (int k = 0; k < 3; ++k) px[k] += g * color[k];
            }
    }
    for (std::size_t i = 0; i < H * W * 3; ++i) out[i] = static_cast<double>(static_cast<float>(std::min(out[i], 1.0)));
    return clamped;
}

/// Renders every frame of a pose sequence to [T,H,W,3]. Values are rounded
/// to float so the clip survives storage unchanged.
inline Tensor render_video(const PoseSequence& poses, std::size_t H, std::size_t W, RenderStats* stats = nullptr) {
    const std::size_t T = poses.frames(), J = poses.joints();
    std::vector<double> v(T * H * W * 3, 0.0);
    std::size_t clamped = 0;
    std::vector<std::array<double, 3>> joints(J);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < J; ++j) joints[j] = {poses.at(0, j, t), poses.at(1, j, t), poses.at(2, j, t)};
        clamped += render_frame(joints, H, W, v.data() + t * H * W * 3);
    }
    if (clamped) warn("render_video: " + std::to_string(clamped) + " joint positions outside the world box were clamped");
    if (stats) stats->clamped += clamped;
    return Tensor({T, H, W, 3}, std::move(v));
}

/// Noisy sample `index` of class `label`; depends only on (spec.seed, index).
inline SampleRecord synthetic_sample(const SyntheticTaskSpec& spec, std::size_t index) {
    const std::size_t label = index % spec.class_count;
    const std::size_t T = spec.frames;
    std::vector<double> v = detail::class_template(label, T);
    std::mt19937_64 rng(mix_seed(spec.seed, index));
    std::normal_distribution<double> noise(0.0, 1.0);
    if (spec.noise > 0.0)
        for (auto& x : v) x += spec.noise * noise(rng);
    SampleRecord s;
    s.poses = PoseSequence(Tensor({3, 8, T}, std::move(v)));
    s.video = render_video(s.poses, spec.height, spec.width);
    s.label = label;
    s.id = action_classes()[label].name + "_" + std::to_string(index);
    return s;
}

/// samples_per_class × class_count records, labels interleaved.
inline Dataset generate_synthetic(const SyntheticTaskSpec& spec) {
    spec.validate();
    Dataset d;
    d.reserve(spec.class_count * spec.samples_per_class);
    for (std::size_t i = 0; i < spec.class_count * spec.samples_per_class; ++i) d.push_back(synthetic_sample(spec, i));
    return d;
}

// ---------------------------------------------------------------------------
// Temporal sampling

/// Indices round(k(T-1)/(t_p-1)), ties to even; middle frame when t_p = 1;
/// clamped to the last frame when the clip is shorter than t_p.
inline std::vector<std::size_t> uniform_sample_indices(std::size_t T, std::size_t t_p) {
    detail::require(T >= 1, "cannot sample from an empty pose sequence");
    detail::require(t_p >= 1, "t_p must be at least 1");
    std::vector<std::size_t> idx(t_p);
    if (T < t_p) {
        for (std::size_t k = 0; k < t_p; ++k) idx[k] = std::min(k, T - 1);
        return idx;
    }
    if (t_p == 1) return {(T - 1) / 2};
    const std::size_t den = t_p - 1;
    for (std::size_t k = 0; k < t_p; ++k) {
        const std::size_t num = k * (T - 1);
        std::size_t q = num / den;
        const std::size_t r2 = 2 * (num % den);
        if (r2 > den || (r2 == den && q % 2 == 1)) ++q;
        idx[k] = q;
    }
    return idx;
}

/// Pose frames per clip used for each benchmark family.
inline std::size_t default_pose_frames(const std::string& family) {
    if (family == "ntu60" || family == "ntu120") return 20;
    if (family == "smarthome") return 30;
    if (family == "nucla") return 5;
    throw Error("unknown dataset family '" + family + "' (expected ntu60, ntu120, smarthome or nucla)");
}

inline PoseSequence uniform_sample_poses(const PoseSequence& seq, std::size_t t_p) {
    const auto idx = uniform_sample_indices(seq.frames(), t_p);
    const std::size_t J = seq.joints();
    std::vector<double> v(3 * J * t_p);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t j = 0; j < J; ++j)
            for (std::size_t k = 0; k < t_p; ++k) v[(a * J + j) * t_p + k] = seq.at(a, j, idx[k]);
    return PoseSequence(Tensor({3, J, t_p}, std::move(v)));
}

// ---------------------------------------------------------------------------
// Procrustes distance and dynamicity

/// Full Procrustes distance between two 3 × J point sets.
inline double procrustes_distance(const Tensor& A, const Tensor& B) {
    detail::require<ShapeError>(A.rank() == 2 && A.dim(0) == 3 && A.shape() == B.shape(),
                                "procrustes_distance: expects two 3xJ poses, got ", diff::to_string(A.shape()), " and ",
                                diff::to_string(B.shape()));
    const std::size_t J = A.dim(1);
    detail::require(J >= 2, "procrustes_distance needs at least 2 joints");
    using Mat = Eigen::Matrix<double, 3, Eigen::Dynamic>;
    auto load = [J](const Tensor& P) {
        Mat m(3, J);
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t j = 0; j < J; ++j) m(a, j) = P[a * J + j];
        m.colwise() -= m.rowwise().mean();
        return m;
    };
    Mat a = load(A), b = load(B);
    const double na = a.norm(), nb = b.norm();
    if (na < 1e-12 || nb < 1e-12) {
        warn("procrustes_distance: degenerate pose with coincident joints, distance taken as 0");
        return 0.0;
    }
    a /= na;
    b /= nb;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(a * b.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) D(2, 2) = -1.0;
    const Eigen::Matrix3d R = svd.matrixU() * D * svd.matrixV().transpose();
    return (a - R * b).norm();
}

/// Mean Procrustes distance between consecutive frames; 0 for one frame.
inline double dynamicity(const PoseSequence& seq) {
    if (seq.frames() < 2) return 0.0;
    double s = 0.0;
    Tensor prev = seq.frame(0);
    for (std::size_t t = 1; t < seq.frames(); ++t) {
        Tensor cur = seq.frame(t);
        s += procrustes_distance(prev, cur);
        prev = std::move(cur);
    }
    return s / static_cast<double>(seq.frames() - 1);
}

// ---------------------------------------------------------------------------
// Files: pose text, VPK1 video, TSV manifest

inline void write_poses(std::ostream& out, const PoseSequence& seq) {
    char buf[96];
    for (std::size_t t = 0; t < seq.frames(); ++t) {
        if (t) out << '\n';
        for (std::size_t j = 0; j < seq.joints(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", seq.at(0, j, t), seq.at(1, j, t), seq.at(2, j, t));
            out << buf;
        }
    }
}

inline PoseSequence read_poses(std::istream& in, const std::string& source) {
    std::vector<std::vector<std::array<double, 3>>> frames(1);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            if (!frames.back().empty()) frames.emplace_back();
            continue;
        }
        std::istringstream ls(line);
        std::array<double, 3> p{};
        std::string extra;
        if (!(ls >> p[0] >> p[1] >> p[2]) || (ls >> extra))
            throw FormatError(source + ":" + std::to_string(lineno) + ": expected 'x y z', got '" + line + "'");
        frames.back().push_back(p);
    }
    if (frames.back().empty()) frames.pop_back();
    detail::require<FormatError>(!frames.empty(), source, ": no pose frames");
    const std::size_t J = frames[0].size(), T = frames.size();
    for (std::size_t t = 0; t < T; ++t)
        detail::require<FormatError>(frames[t].size() == J, source, ": frame ", t, " has ", frames[t].size(),
                                     " joints, frame 0 has ", J);
    std::vector<double> v(3 * J * T);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < J; ++j)
            for (std::size_t a = 0; a < 3; ++a) v[(a * J + j) * T + t] = frames[t][j][a];
    return PoseSequence(Tensor({3, J, T}, std::move(v)));
}

/// "VPK1", then T, H, W, channels as little-endian u32, then little-endian
/// float32 values in [T,H,W,C] order.
inline void write_video(std::ostream& out, const Tensor& video) {
    detail::require<ShapeError>(video.rank() == 4, "write_video: expects [T,H,W,C], got ",
                                diff::to_string(video.shape()));
    out.write("VPK1", 4);
    for (std::size_t d = 0; d < 4; ++d) {
        const auto v = static_cast<std::uint32_t>(video.dim(d));
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    std::vector<unsigned char> bytes(video.size() * 4);
    for (std::size_t i = 0; i < video.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(video[i]));
        for (int k = 0; k < 4; ++k) bytes[4 * i + k] = static_cast<unsigned char>(u >> (8 * k));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor read_video(std::istream& in, const std::string& source) {
    auto read = [&](unsigned char* dst, std::size_t n, std::size_t offset) {
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        detail::require<FormatError>(static_cast<std::size_t>(in.gcount()) == n, source, ": truncated at offset ",
                                     offset);
    };
    unsigned char head[20];
    read(head, 20, 0);
    detail::require<FormatError>(std::string(reinterpret_cast<char*>(head), 4) == "VPK1", source,
                                 ": bad magic at offset 0, expected VPK1");
    Shape s(4);
    for (std::size_t d = 0; d < 4; ++d) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(head[4 + 4 * d + i]) << (8 * i);
        s[d] = v;
    }
    detail::require<FormatError>(s[3] == 3 && s[0] > 0 && s[1] > 0 && s[2] > 0, source,
                                 ": unsupported video header ", diff::to_string(s), " at offset 4");
    const std::size_t n = diff::numel(s);
    std::vector<unsigned char> bytes(4 * n);
    read(bytes.data(), bytes.size(), 20);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(bytes[4 * i + k]) << (8 * k);
        v[i] = std::bit_cast<float>(u);
    }
    detail::require<FormatError>(in.peek() == std::char_traits<char>::eof(), source, ": trailing bytes after offset ",
                                 20 + 4 * n);
    return Tensor(std::move(s), std::move(v));
}

inline constexpr const char* kManifestHeader = "# vpn-manifest v1";

/// Writes `dir/manifest.tsv` with videos/ and poses/ beside it. Paths in the
/// manifest are relative to its directory.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "videos");
    fs::create_directories(dir / "poses");
    std::ofstream manifest(dir / "manifest.tsv");
    detail::require(manifest.good(), "cannot write ", (dir / "manifest.tsv").string());
    manifest << kManifestHeader << "\n# id\tlabel\tvideo\tposes\n";
    for (const auto& s : data) {
        detail::require(!s.id.empty() && s.id.find_first_of("\t\n/\\") == std::string::npos, "sample id '", s.id,
                        "' cannot be used as a file name");
        const std::string vrel = "videos/" + s.id + ".vpk", prel = "poses/" + s.id + ".txt";
        std::ofstream vf(dir / vrel, std::ios::binary);
        write_video(vf, s.video);
        std::ofstream pf(dir / prel);
        write_poses(pf, s.poses);
        detail::require(vf.good() && pf.good(), "failed writing sample ", s.id);
        manifest << s.id << '\t' << s.label << '\t' << vrel << '\t' << prel << '\n';
    }
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream in(manifest_path);
    detail::require<FormatError>(in.good(), "cannot open manifest ", manifest_path.string());
    const std::string src = manifest_path.string();
    const fs::path base = manifest_path.parent_path();
    std::string line;
    detail::require<FormatError>(std::getline(in, line) && line == kManifestHeader, src,
                                 ":1: missing header '", kManifestHeader, "'");
    Dataset data;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, '\t')) f.push_back(field);
        const std::string where = src + ":" + std::to_string(lineno) + ": ";
        detail::require<FormatError>(f.size() == 4, where, "expected 4 tab-separated fields, got ", f.size());
        SampleRecord s;
        s.id = f[0];
        try {
            std::size_t used = 0;
            s.label = std::stoul(f[1], &used);
            detail::require<FormatError>(used == f[1].size() && f[1][0] != '-', "");
        } catch (const std::exception&) {
            throw FormatError(where + "bad label '" + f[1] + "'");
        }
        const fs::path vp = base / f[2], pp = base / f[3];
        std::ifstream vf(vp, std::ios::binary);
        detail::require<FormatError>(vf.good(), where, "missing video file ", vp.string());
        s.video = read_video(vf, vp.string());
        std::ifstream pf(pp);
        detail::require<FormatError>(pf.good(), where, "missing pose file ", pp.string());
        s.poses = read_poses(pf, pp.string());
        detail::require<FormatError>(s.video.dim(0) == s.poses.frames(), where, "video has ", s.video.dim(0),
                                     " frames but the pose sequence has ", s.poses.frames());
        data.push_back(std::move(s));
    }
    return data;
}

}  // namespace vpn
