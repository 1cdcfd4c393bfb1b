// vpn: command-line front end for data generation, training, evaluation,
// ablation, gradient checking and dynamicity reports.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "vpn/config.hpp"

namespace fs = std::filesystem;
using namespace vpn;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out = "out";
};

/// Raised for problems with the invocation itself; exits with status 2.
struct UsageError : Error {
    using Error::Error;
};

RunConfig resolve(const Common& c) {
    if (!c.config.empty() && !fs::exists(c.config)) throw UsageError("config file not found: " + c.config);
    try {
        return load_run_config(c.config, c.overrides);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    return out;
}

fs::path prepare(const Common& c, const RunConfig& cfg) {
    fs::path dir(c.out);
    fs::create_directories(dir);
    open_out(dir / "resolved_config.json") << to_json(cfg).dump(2) << '\n';
    return dir;
}

Dataset train_split(const RunConfig& cfg, const std::string& manifest) {
    return manifest.empty() ? generate_synthetic(cfg.data) : load_dataset(manifest);
}

Dataset test_split(const RunConfig& cfg, const std::string& manifest) {
    return manifest.empty() ? generate_synthetic(cfg.test_spec()) : load_dataset(manifest);
}

void report_json(const fs::path& p, const EvalReport& r) {
    json per_class = json::array();
    for (const auto& a : r.per_class) per_class.push_back(a ? json(*a) : json(nullptr));
    open_out(p) << json{{"accuracy", r.accuracy}, {"per_class", per_class}, {"samples", r.labels.size()}}.dump(2)
                << '\n';
}

int cmd_gen(const Common& c) {
    RunConfig cfg = resolve(c);
    fs::path dir = prepare(c, cfg);
    save_dataset(dir / "train", generate_synthetic(cfg.data));
    save_dataset(dir / "test", generate_synthetic(cfg.test_spec()));
    std::cout << "wrote " << (dir / "train" / "manifest.tsv").string() << " and "
              << (dir / "test" / "manifest.tsv").string() << '\n';
    return 0;
}

int cmd_train(const Common& c, const std::string& data) {
    RunConfig cfg = resolve(c);
    fs::path dir = prepare(c, cfg);
    Dataset train = train_split(cfg, data);
    auto res = train_loop(train, cfg.train, {nullptr, [](const EpochRecord& e) {
                                                 std::cout << "epoch " << e.epoch << " L " << e.L << " L_C " << e.L_C
                                                           << " L_e " << e.L_e << " L_a " << e.L_a << " train_acc "
                                                           << e.train_acc << " lr " << e.lr << std::endl;
                                             }});
    save_checkpoint((dir / "checkpoint.vpnm").string(), res.model);
    {
        auto o = open_out(dir / "history.csv");
        write_history_csv(o, res.history);
    }
    {
        auto o = open_out(dir / "steps.csv");
        write_steps_csv(o, res.steps);
    }
    std::cout << "wrote " << (dir / "checkpoint.vpnm").string() << '\n';
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data) {
    RunConfig cfg = resolve(c);
    if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
    fs::path dir = prepare(c, cfg);
    Model model = load_checkpoint(checkpoint);
    EvalReport r = evaluate(test_split(cfg, data), model);
    {
        auto o = open_out(dir / "predictions.csv");
        write_predictions_csv(o, r);
    }
    {
        auto o = open_out(dir / "confusion.csv");
        write_confusion_csv(o, r);
    }
    report_json(dir / "report.json", r);
    std::cout << "accuracy " << r.accuracy << '\n';
    return 0;
}

int cmd_ablate(const Common& c, const std::string& train_data, const std::string& test_data) {
    RunConfig cfg = resolve(c);
    fs::path dir = prepare(c, cfg);
    auto variants = cfg.ablate_variants.empty() ? ablation_variants() : select_variants(cfg.ablate_variants);
    auto table = ablate(train_split(cfg, train_data), test_split(cfg, test_data), cfg.train, cfg.ablate_seeds,
                        variants, {[](const AblationCell& cell) {
                            std::cout << cell.variant << " seed " << cell.seed << ' '
                                      << (cell.report ? "accuracy " + std::to_string(cell.report->accuracy)
                                                      : "error " + cell.error)
                                      << std::endl;
                        }});
    {
        auto o = open_out(dir / "ablation_cells.csv");
        write_ablation_cells_csv(o, table);
    }
    {
        auto o = open_out(dir / "ablation_summary.csv");
        write_ablation_summary_csv(o, table.summary());
    }
    std::size_t failed = 0;
    for (const auto& cell : table.cells) failed += !cell.report;
    std::cout << "wrote " << (dir / "ablation_summary.csv").string() << " (" << failed << " failed cells)\n";
    return failed ? 1 : 0;
}

int cmd_gradcheck(const Common& c, double tolerance, std::uint64_t seed) {
    RunConfig cfg = resolve(c);
    fs::path dir = prepare(c, cfg);
    auto out = open_out(dir / "gradcheck.csv");
    out << "pose_backbone,embedding_loss,group,max_rel_error\n";
    double worst = 0.0;
    for (auto kind : {PoseBackboneKind::gcn, PoseBackboneKind::recurrent})
        for (auto loss :
             {EmbeddingLossKind::ne, EmbeddingLossKind::kl_fp, EmbeddingLossKind::kl_pf, EmbeddingLossKind::kl_bi}) {
            auto r = model_gradcheck(gradcheck_toy_config(kind, loss), seed);
            for (const auto& [group, err] : r.per_group)
                out << to_string(kind) << ',' << to_string(loss) << ',' << group << ',' << detail::fmt17(err) << '\n';
            std::cout << to_string(kind) << ' ' << to_string(loss) << " max_rel_error " << r.max_rel_error << " ("
                      << r.worst_parameter << ")\n";
            worst = std::max(worst, r.max_rel_error);
        }
    const bool ok = worst < tolerance;
    std::cout << (ok ? "PASS" : "FAIL") << " max_rel_error " << worst << " tolerance " << tolerance << '\n';
    return ok ? 0 : 1;
}

int cmd_dynamicity(const Common& c, const std::string& data, const std::string& checkpoint, std::size_t bins) {
    RunConfig cfg = resolve(c);
    if (bins == 0) throw UsageError("--bins must be at least 1");
    if (!checkpoint.empty() && !fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
    fs::path dir = prepare(c, cfg);
    Dataset ds = test_split(cfg, data);
    std::optional<EvalReport> report;
    if (!checkpoint.empty()) report = evaluate(ds, load_checkpoint(checkpoint));

    std::vector<double> d;
    for (const auto& s : ds) d.push_back(dynamicity(s.poses));
    const double lo = d.empty() ? 0.0 : *std::min_element(d.begin(), d.end());
    const double hi = d.empty() ? 0.0 : *std::max_element(d.begin(), d.end());
    const double width = (hi - lo) / static_cast<double>(bins);
    auto bin_of = [&](double v) {
        if (width <= 0.0) return std::size_t{0};
        return std::min(bins - 1, static_cast<std::size_t>((v - lo) / width));
    };

    auto samples = open_out(dir / "dynamicity.csv");
    samples << "id,label,dynamicity,bin" << (report ? ",correct" : "") << '\n';
    std::vector<std::size_t> count(bins, 0), correct(bins, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::size_t b = bin_of(d[i]);
        ++count[b];
        samples << ds[i].id << ',' << ds[i].label << ',' << detail::fmt17(d[i]) << ',' << b;
        if (report) {
            const bool ok = report->predictions[i] == report->labels[i];
            correct[b] += ok;
            samples << ',' << ok;
        }
        samples << '\n';
    }
    auto summary = open_out(dir / "dynamicity_bins.csv");
    summary << "bin,lower,upper,samples" << (report ? ",accuracy" : "") << '\n';
    for (std::size_t b = 0; b < bins; ++b) {
        summary << b << ',' << detail::fmt17(lo + width * b) << ',' << detail::fmt17(b + 1 == bins ? hi : lo + width * (b + 1))
                << ',' << count[b];
        if (report) summary << ',' << (count[b] ? detail::fmt17(static_cast<double>(correct[b]) / count[b]) : "");
        summary << '\n';
    }
    std::cout << "wrote " << (dir / "dynamicity.csv").string() << '\n';
    return 0;
}

void print_error(const std::string& kind, const std::string& message) {
    std::cout.flush();
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    vpn::tune_allocator();
    CLI::App app{"Video-pose network: synthetic data, training, evaluation and ablation"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config, "JSON config file; sections data, train, model, ablate");
        sub->add_option("-s,--set", common.overrides, "Override a config value, e.g. train.epochs=5")
            ->allow_extra_args(false);
        sub->add_option("-o,--out", common.out, "Output directory")->capture_default_str();
    };

    std::string data, test_data, checkpoint;
    double tolerance = 1e-4;
    std::uint64_t gc_seed = 1;
    std::size_t bins = 5;

    auto* gen = app.add_subcommand("gen", "Write the synthetic train and test splits");
    add_common(gen);
    auto* train = app.add_subcommand("train", "Train a model and write checkpoint and history");
    add_common(train);
    train->add_option("--data", data, "Training manifest (default: generate from the config)");
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", data, "Test manifest (default: generate the test split)");
    auto* abl = app.add_subcommand("ablate", "Run the ablation grid over several seeds");
    add_common(abl);
    abl->add_option("--train-data", data, "Training manifest");
    abl->add_option("--test-data", test_data, "Test manifest");
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full objective on the toy config");
    add_common(gc);
    gc->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
    gc->add_option("--seed", gc_seed, "Initialization seed")->capture_default_str();
    auto* dyn = app.add_subcommand("dynamicity", "Per-sample action dynamicity, binned");
    add_common(dyn);
    dyn->add_option("--data", data, "Manifest (default: generate the test split)");
    dyn->add_option("--checkpoint", checkpoint, "Also report accuracy per bin for this checkpoint");
    dyn->add_option("--bins", bins, "Number of equal-width bins")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (*gen) return cmd_gen(common);
        if (*train) return cmd_train(common, data);
        if (*eval) return cmd_eval(common, checkpoint, data);
        if (*abl) return cmd_ablate(common, data, test_data);
        if (*gc) return cmd_gradcheck(common, tolerance, gc_seed);
        if (*dyn) return cmd_dynamicity(common, data, checkpoint, bins);
    } catch (const UsageError& e) {
        print_error("usage", e.what());
        return 2;
    } catch (const std::exception& e) {
        print_error("runtime", e.what());
        return 1;
    }
    return 2;
}
