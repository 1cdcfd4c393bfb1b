#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "vpn/data.hpp"
#include "vpn/model.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace vpn {

/// Every step frees and reallocates the same large tensors. With glibc's
/// defaults those go through mmap/munmap and page faults take about a quarter
/// of the run time; keeping them on the heap avoids that. Call once from main.
inline void tune_allocator() {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
}

struct TrainConfig {
    std::size_t epochs = 30;
    double base_lr = 0.01;
    double decay_factor = 0.1;
    std::size_t decay_every = 10;
    std::size_t batch_size = 8;
    std::uint64_t seed = 1;
    /// Checkpoint whose matching parameters initialize the model.
    std::string warm_start;
    ModelConfig model;

    void validate() const {
        detail::require(epochs > 0, "train.epochs must be > 0");
        detail::require(base_lr > 0.0 && std::isfinite(base_lr), "train.base_lr must be > 0");
        detail::require(decay_factor > 0.0 && decay_factor <= 1.0, "train.decay_factor must be in (0, 1]");
        detail::require(decay_every > 0, "train.decay_every must be > 0");
        detail::require(batch_size > 0, "train.batch_size must be > 0");
        model.validate();
    }
};

/// base_lr · decay_factor^⌊epoch / decay_every⌋
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    return cfg.base_lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

/// Gradients of every parameter bound on the tape, by name. Throws before
/// anything is updated if one of them is not finite.
inline std::map<std::string, Tensor> collect_gradients(const Binding& bind, const diff::Gradients& grads) {
    std::map<std::string, Tensor> g;
    for (const auto& [name, var] : bind.used()) {
        if (!var.requires_grad()) continue;
        detail::require<NonFiniteError>(grads.finite(var), "non-finite gradient for parameter '", name,
                                        "'; step rejected");
        g.emplace(name, grads.contains(var) ? grads[var] : Tensor::zeros(var.shape()));
    }
    return g;
}

/// p ← p − lr·g for every named gradient, then the unit-norm projection of
/// T_v and T_p.
inline void sgd_step(ParameterSet& params, const std::map<std::string, Tensor>& grads, double lr) {
    for (const auto& [name, g] : grads)
        detail::require<ShapeError>(g.shape() == params.get(name).shape(), "gradient of '", name, "' has shape ",
                                    diff::to_string(g.shape()), ", parameter has ",
                                    diff::to_string(params.get(name).shape()));
    for (const auto& [name, g] : grads) {
        const Tensor& p = params.get(name);
        std::vector<double> v(p.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] - lr * g[i];
        params.set(name, Tensor(p.shape(), std::move(v)));
    }
    for (const auto& name : projection_names())
        if (params.contains(name)) params.set(name, enforce_norm_constraint(params.get(name)));
}

// ---------------------------------------------------------------------------
// Batches

/// Checks that a sample fits the model's input extents. With `exact` the
/// spatial size must equal the training extent; otherwise it may be larger.
inline void check_sample(const ModelConfig& cfg, const SampleRecord& s, bool exact) {
    const auto& v = s.video.shape();
    detail::require<ShapeError>(v.size() == 4 && v[3] == 3, "sample '", s.id, "': video must be [T,H,W,3]");
    detail::require<ShapeError>(v[0] == cfg.video_frames(), "sample '", s.id, "' has ", v[0],
                                " video frames, the model expects ", cfg.video_frames());
    if (exact)
        detail::require<ShapeError>(v[1] == cfg.video_height() && v[2] == cfg.video_width(), "sample '", s.id,
                                    "' is ", v[1], "x", v[2], ", the model trains on ", cfg.video_height(), "x",
                                    cfg.video_width());
    else
        detail::require<ShapeError>(v[1] >= cfg.video_height() && v[2] >= cfg.video_width(), "sample '", s.id,
                                    "' is ", v[1], "x", v[2], ", smaller than the training extent ",
                                    cfg.video_height(), "x", cfg.video_width());
    detail::require<ShapeError>(s.poses.joints() == cfg.joints, "sample '", s.id, "' has ", s.poses.joints(),
                                " joints, the model expects ", cfg.joints);
    detail::require(s.label < cfg.class_count, "sample '", s.id, "' has label ", s.label, " but the model has ",
                    cfg.class_count, " classes");
}

struct Batch {
    Tensor video;  ///< [N,T,H,W,3]
    Tensor poses;  ///< [N,J,t_p,3]
    std::vector<std::size_t> labels;
};

inline Batch make_batch(const Dataset& data, const std::vector<PoseSequence>& sampled,
                        const std::vector<std::size_t>& idx) {
    const Shape& vs = data[idx[0]].video.shape();
    const std::size_t per = data[idx[0]].video.size();
    std::vector<double> video(idx.size() * per);
    std::vector<const PoseSequence*> poses;
    Batch b;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& s = data[idx[k]];
        std::copy(s.video.values().begin(), s.video.values().end(), video.begin() + k * per);
        poses.push_back(&sampled[idx[k]]);
        b.labels.push_back(s.label);
    }
    b.video = Tensor({idx.size(), vs[0], vs[1], vs[2], vs[3]}, std::move(video));
    b.poses = stack_poses(poses);
    return b;
}

inline std::vector<PoseSequence> sample_all_poses(const Dataset& data, std::size_t t_p) {
    std::vector<PoseSequence> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(uniform_sample_poses(s.poses, t_p));
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
    std::size_t epoch = 0, step = 0;
    double L = 0, L_C = 0, L_e = 0, L_a = 0;
    double lambda1 = 0, lambda2 = 0, lr = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double L = 0, L_C = 0, L_e = 0, L_a = 0;
    double train_acc = 0, lr = 0;
};

struct TrainResult {
    Model model;
    std::vector<EpochRecord> history;
    std::vector<StepRecord> steps;
};

/// Copies every parameter of `source` whose name and shape exist in `model`.
/// Returns the number of tensors copied.
inline std::size_t warm_start_from(Model& model, const Model& source) {
    std::size_t copied = 0;
    for (const auto& name : source.params.names())
        if (model.params.contains(name) && model.params.get(name).shape() == source.params.get(name).shape()) {
            model.params.set(name, source.params.get(name));
            ++copied;
        }
    for (const auto& [name, st] : source.running) {
        auto it = model.running.find(name);
        if (it != model.running.end() && it->second.mean.size() == st.mean.size()) it->second = st;
    }
    return copied;
}

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct StepOutcome {
    StepRecord record;
    std::size_t correct = 0;  ///< training-mode predictions matching the labels
};

/// One optimizer step on a minibatch.
inline StepOutcome train_step(Model& model, const Batch& b, double lr, std::mt19937_64& dropout_rng) {
    const ModelConfig& cfg = model.config;
    diff::Tape tape;
    Binding bind(model.params, &tape);
    RunningStats batch_stats;
    ForwardContext ctx{bind, true, &dropout_rng, nullptr, &batch_stats, cfg.bn_eps};
    auto out = model_forward(ctx, model, Var(b.video), Var(b.poses));
    auto terms = objective(cfg, out, b.labels);
    auto grads = diff::backward(tape, terms.L);

    sgd_step(model.params, collect_gradients(bind, grads), lr);

    const double m = cfg.bn_momentum;
    for (const auto& [name, st] : batch_stats) {
        auto& r = model.running.at(name);
        for (std::size_t c = 0; c < st.mean.size(); ++c) {
            r.mean[c] = m * r.mean[c] + (1.0 - m) * st.mean[c];
            r.var[c] = m * r.var[c] + (1.0 - m) * st.var[c];
        }
    }

    StepRecord rec;
    rec.L = terms.L.value().item();
    rec.L_C = terms.L_C.value().item();
    rec.L_e = terms.L_e.value().item();
    rec.L_a = terms.L_a.value().item();
    rec.lambda1 = terms.lambda1;
    rec.lambda2 = terms.lambda2;
    rec.lr = lr;
    std::size_t correct = 0;
    const std::size_t K = cfg.class_count;
    for (std::size_t n = 0; n < b.labels.size(); ++n) {
        auto row = out.probs.value().values().subspan(n * K, K);
        if (argmax(row) == b.labels[n]) ++correct;
    }
    return {rec, correct};
}

inline TrainResult train_loop(const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    detail::require(!data.empty(), "cannot train on an empty dataset");
    for (const auto& s : data) check_sample(cfg.model, s, true);

    TrainResult res{init_model(cfg.model, cfg.seed), {}, {}};
    if (!cfg.warm_start.empty()) warm_start_from(res.model, load_checkpoint(cfg.warm_start));

    const auto sampled = sample_all_poses(data, cfg.model.t_p);
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 101));
    std::mt19937_64 dropout_rng(mix_seed(cfg.seed, 102));
    std::vector<std::size_t> order(data.size());
    std::size_t global_step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochRecord ep;
        ep.epoch = epoch;
        ep.lr = lr;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + cfg.batch_size));
            auto [rec, ok] = train_step(res.model, make_batch(data, sampled, idx), lr, dropout_rng);
            correct += ok;
            rec.step = global_step++;
            rec.epoch = epoch;
            const double w = static_cast<double>(idx.size()) / static_cast<double>(order.size());
            ep.L += w * rec.L;
            ep.L_C += w * rec.L_C;
            ep.L_e += w * rec.L_e;
            ep.L_a += w * rec.L_a;
            res.steps.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
        }
        ep.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
        res.history.push_back(ep);
        if (hooks.on_epoch) hooks.on_epoch(ep);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    double accuracy = 0.0;
    std::vector<std::optional<double>> per_class;      ///< absent when a class has no samples
    std::vector<std::vector<std::size_t>> confusion;  ///< [true][predicted]
    std::vector<std::size_t> predictions;
    std::vector<std::size_t> labels;
    std::vector<std::string> ids;
    std::vector<std::vector<double>> probabilities;

    /// Fraction of samples of classes a or b that were classified correctly.
    std::optional<double> pair_accuracy(std::size_t a, std::size_t b) const {
        std::size_t n = 0, ok = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == a || labels[i] == b) {
                ++n;
                ok += predictions[i] == labels[i];
            }
        if (n == 0) return std::nullopt;
        return static_cast<double>(ok) / static_cast<double>(n);
    }
};

inline EvalReport evaluate(const Dataset& data, const Model& model) {
    const ModelConfig& cfg = model.config;
    const std::size_t K = cfg.class_count;
    EvalReport r;
    r.confusion.assign(K, std::vector<std::size_t>(K, 0));
    for (const auto& s : data) {
        check_sample(cfg, s, false);
        const auto& vs = s.video.shape();
        Tensor video({1, vs[0], vs[1], vs[2], vs[3]}, s.video.to_vector());
        const PoseSequence sampled = uniform_sample_poses(s.poses, cfg.t_p);
        Tensor poses = stack_poses({&sampled});
        Tensor p = fully_convolutional_inference(model, video, poses);
        const std::size_t pred = argmax(p.values());
        r.predictions.push_back(pred);
        r.labels.push_back(s.label);
        r.ids.push_back(s.id);
        r.probabilities.push_back(p.to_vector());
        ++r.confusion[s.label][pred];
    }
    std::size_t correct = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const std::size_t total = std::accumulate(r.confusion[k].begin(), r.confusion[k].end(), std::size_t{0});
        correct += r.confusion[k][k];
        r.per_class.push_back(total ? std::optional<double>(static_cast<double>(r.confusion[k][k]) / total)
                                    : std::nullopt);
    }
    r.accuracy = data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
    return r;
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace detail

inline void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
    out << "epoch,L,L_C,L_e,L_a,train_acc,lr\n";
    for (const auto& e : history)
        out << e.epoch << ',' << detail::fmt17(e.L) << ',' << detail::fmt17(e.L_C) << ',' << detail::fmt17(e.L_e) << ','
            << detail::fmt17(e.L_a) << ',' << detail::fmt17(e.train_acc) << ',' << detail::fmt17(e.lr) << '\n';
}

inline void write_steps_csv(std::ostream& out, const std::vector<StepRecord>& steps) {
    out << "epoch,step,L,L_C,L_e,L_a,lambda1,lambda2,lr\n";
    for (const auto& s : steps)
        out << s.epoch << ',' << s.step << ',' << detail::fmt17(s.L) << ',' << detail::fmt17(s.L_C) << ','
            << detail::fmt17(s.L_e) << ',' << detail::fmt17(s.L_a) << ',' << detail::fmt17(s.lambda1) << ','
            << detail::fmt17(s.lambda2) << ',' << detail::fmt17(s.lr) << '\n';
}

inline void write_predictions_csv(std::ostream& out, const EvalReport& r) {
    out << "id,label,prediction";
    const std::size_t K = r.confusion.size();
    for (std::size_t k = 0; k < K; ++k) out << ",p_" << k;
    out << '\n';
    for (std::size_t i = 0; i < r.ids.size(); ++i) {
        out << r.ids[i] << ',' << r.labels[i] << ',' << r.predictions[i];
        for (double p : r.probabilities[i]) out << ',' << detail::fmt17(p);
        out << '\n';
    }
}

inline void write_confusion_csv(std::ostream& out, const EvalReport& r) {
    const std::size_t K = r.confusion.size();
    out << "true\\predicted";
    for (std::size_t k = 0; k < K; ++k) out << ',' << k;
    out << ",class_accuracy\n";
    for (std::size_t k = 0; k < K; ++k) {
        out << k;
        for (auto c : r.confusion[k]) out << ',' << c;
        out << ',' << (r.per_class[k] ? detail::fmt17(*r.per_class[k]) : std::string("absent")) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
    std::string name;
    std::function<void(ModelConfig&)> apply;
};

/// The ablation grid: the backbone alone; attention without the embedding
/// for each pose backbone and coupler setting; the full model for each of
/// those and every embedding loss; and a λ1 = 1 control that must match the
/// embedding-free cell.
inline std::vector<AblationVariant> ablation_variants() {
    std::vector<AblationVariant> v;
    v.push_back({"backbone", [](ModelConfig& c) {
                     c.attention_enabled = false;
                     c.embedding_enabled = false;
                 }});
    for (auto kind : {PoseBackboneKind::gcn, PoseBackboneKind::recurrent})
        for (bool coupled : {true, false}) {
            const std::string tag = std::string(to_string(kind)) + (coupled ? "_coupled" : "_dissociated");
            v.push_back({"attention_" + tag, [=](ModelConfig& c) {
                             c.attention_enabled = true;
                             c.embedding_enabled = false;
                             c.pose_backbone = kind;
                             c.coupler_enabled = coupled;
                         }});
            for (auto loss : {EmbeddingLossKind::ne, EmbeddingLossKind::kl_fp, EmbeddingLossKind::kl_pf,
                              EmbeddingLossKind::kl_bi})
                v.push_back({"full_" + tag + "_" + to_string(loss), [=](ModelConfig& c) {
                                 c.attention_enabled = true;
                                 c.embedding_enabled = true;
                                 c.pose_backbone = kind;
                                 c.coupler_enabled = coupled;
                                 c.embedding_loss = loss;
                             }});
        }
    v.push_back({"full_gcn_coupled_ne_lambda1_1", [](ModelConfig& c) {
                     c.attention_enabled = true;
                     c.embedding_enabled = true;
                     c.pose_backbone = PoseBackboneKind::gcn;
                     c.coupler_enabled = true;
                     c.embedding_loss = EmbeddingLossKind::ne;
                     c.lambda1 = 1.0;
                 }});
    return v;
}

/// Variants whose names appear in `names`, in grid order. Unknown names are
/// rejected.
inline std::vector<AblationVariant> select_variants(const std::vector<std::string>& names) {
    auto all = ablation_variants();
    for (const auto& n : names)
        detail::require(std::any_of(all.begin(), all.end(), [&](const auto& v) { return v.name == n; }),
                        "unknown ablation variant '", n, "'");
    std::vector<AblationVariant> out;
    for (auto& v : all)
        if (std::find(names.begin(), names.end(), v.name) != names.end()) out.push_back(std::move(v));
    return out;
}

struct AblationCell {
    std::string variant;
    std::uint64_t seed = 0;
    std::optional<EvalReport> report;
    std::string error;
};

struct AblationSummary {
    std::string variant;
    std::size_t runs = 0;
    double mean = 0.0, std = 0.0;
};

struct AblationTable {
    std::vector<AblationCell> cells;

    /// Mean and sample standard deviation of test accuracy per variant, in
    /// first-appearance order. Failed cells are left out of the statistics.
    std::vector<AblationSummary> summary(const std::function<std::optional<double>(const EvalReport&)>& metric =
                                             [](const EvalReport& r) { return std::optional<double>(r.accuracy); })
        const {
        std::vector<AblationSummary> out;
        std::map<std::string, std::vector<double>> values;
        for (const auto& c : cells) {
            if (!values.count(c.variant)) out.push_back({c.variant});
            auto& v = values[c.variant];
            if (c.report)
                if (auto m = metric(*c.report)) v.push_back(*m);
        }
        for (auto& s : out) {
            const auto& v = values[s.variant];
            s.runs = v.size();
            if (v.empty()) continue;
            s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - s.mean) * (x - s.mean);
            s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        }
        return out;
    }

    const AblationSummary* find(const std::vector<AblationSummary>& s, const std::string& name) const {
        for (const auto& x : s)
            if (x.variant == name) return &x;
        return nullptr;
    }
};

struct AblationHooks {
    std::function<void(const AblationCell&)> on_cell;
};

/// Trains and evaluates every variant for every seed. A cell that throws is
/// recorded with its error and the run continues.
inline AblationTable ablate(const Dataset& train, const Dataset& test, const TrainConfig& base,
                            const std::vector<std::uint64_t>& seeds, const std::vector<AblationVariant>& variants,
                            const AblationHooks& hooks = {}) {
    detail::require(seeds.size() >= 3, "ablation needs at least 3 seeds, got ", seeds.size());
    AblationTable table;
    for (const auto& v : variants)
        for (auto seed : seeds) {
            AblationCell cell{v.name, seed, std::nullopt, {}};
            try {
                TrainConfig cfg = base;
                cfg.seed = seed;
                v.apply(cfg.model);
                auto res = train_loop(train, cfg);
                cell.report = evaluate(test, res.model);
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            if (hooks.on_cell) hooks.on_cell(cell);
            table.cells.push_back(std::move(cell));
        }
    return table;
}

inline void write_ablation_cells_csv(std::ostream& out, const AblationTable& t) {
    out << "variant,seed,accuracy,status\n";
    for (const auto& c : t.cells) {
        out << c.variant << ',' << c.seed << ',' << (c.report ? detail::fmt17(c.report->accuracy) : std::string()) << ',';
        if (c.report) {
            out << "ok";
        } else {
            std::string e = c.error;
            std::replace(e.begin(), e.end(), ',', ';');
            std::replace(e.begin(), e.end(), '\n', ' ');
            out << "error: " << e;
        }
        out << '\n';
    }
}

inline void write_ablation_summary_csv(std::ostream& out, const std::vector<AblationSummary>& s) {
    out << "variant,runs,mean_accuracy,std_accuracy\n";
    for (const auto& x : s)
        out << x.variant << ',' << x.runs << ',' << detail::fmt17(x.mean) << ',' << detail::fmt17(x.std) << '\n';
}

}  // namespace vpn
