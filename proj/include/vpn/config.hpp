#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vpn/train.hpp"

namespace vpn {

/// Everything one command-line run needs: the synthetic task (train and test
/// splits), the training schedule with its model, and the ablation grid.
struct RunConfig {
    SyntheticTaskSpec data;
    std::size_t test_samples_per_class = 10;
    std::uint64_t test_seed = 1000;
    TrainConfig train;
    std::vector<std::uint64_t> ablate_seeds{1, 2, 3, 4, 5};
    std::vector<std::string> ablate_variants;  ///< empty: the whole grid

    SyntheticTaskSpec test_spec() const {
        SyntheticTaskSpec s = data;
        s.samples_per_class = test_samples_per_class;
        s.seed = test_seed;
        return s;
    }

    void validate() const {
        data.validate();
        train.validate();
        detail::require(test_seed != data.seed, "data.test_seed must differ from data.seed");
        detail::require(ablate_seeds.size() >= 3, "ablate.seeds needs at least 3 seeds");
        select_variants(ablate_variants);
    }
};

inline json to_json(const SyntheticTaskSpec& s) {
    return json{{"class_count", s.class_count}, {"joints", s.joints},   {"frames", s.frames},
                {"height", s.height},           {"width", s.width},     {"samples_per_class", s.samples_per_class},
                {"noise", s.noise},             {"seed", s.seed}};
}

inline json to_json(const RunConfig& r) {
    json data = to_json(r.data);
    data["test_samples_per_class"] = r.test_samples_per_class;
    data["test_seed"] = r.test_seed;
    const TrainConfig& t = r.train;
    return json{{"data", data},
                {"train",
                 {{"epochs", t.epochs},
                  {"base_lr", t.base_lr},
                  {"decay_factor", t.decay_factor},
                  {"decay_every", t.decay_every},
                  {"batch_size", t.batch_size},
                  {"seed", t.seed},
                  {"warm_start", t.warm_start}}},
                {"model", to_json(t.model)},
                {"ablate", {{"seeds", r.ablate_seeds}, {"variants", r.ablate_variants}}}};
}

namespace detail {

inline void require_object(const json& j, const std::string& path) {
    require<FormatError>(j.is_object(), "config section '", path, "' must be an object");
}

inline std::size_t json_size(const json& v, const std::string& path) {
    require<FormatError>(v.is_number_integer() && v.get<long long>() >= 0, "config key '", path,
                         "' must be a non-negative integer");
    return v.get<std::size_t>();
}

inline double json_number(const json& v, const std::string& path) {
    require<FormatError>(v.is_number(), "config key '", path, "' must be a number");
    return v.get<double>();
}

}  // namespace detail

/// Reads a config document. Every section is optional and absent keys keep
/// their defaults; unknown sections and keys are rejected.
inline RunConfig run_config_from_json(const json& j) {
    using detail::json_number;
    using detail::json_size;
    detail::require_object(j, "<root>");
    RunConfig r;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& section = it.key();
        const json& body = it.value();
        if (section == "model") {
            r.train.model = model_config_from_json(body, "model.");
            continue;
        }
        detail::require_object(body, section);
        for (auto kv = body.begin(); kv != body.end(); ++kv) {
            const std::string& k = kv.key();
            const json& v = kv.value();
            const std::string path = section + "." + k;
            if (section == "data") {
                if (k == "class_count") r.data.class_count = json_size(v, path);
                else if (k == "joints") r.data.joints = json_size(v, path);
                else if (k == "frames") r.data.frames = json_size(v, path);
                else if (k == "height") r.data.height = json_size(v, path);
                else if (k == "width") r.data.width = json_size(v, path);
                else if (k == "samples_per_class") r.data.samples_per_class = json_size(v, path);
                else if (k == "noise") r.data.noise = json_number(v, path);
                else if (k == "seed") r.data.seed = json_size(v, path);
                else if (k == "test_samples_per_class") r.test_samples_per_class = json_size(v, path);
                else if (k == "test_seed") r.test_seed = json_size(v, path);
                else throw FormatError("unknown config key '" + path + "'");
            } else if (section == "train") {
                if (k == "epochs") r.train.epochs = json_size(v, path);
                else if (k == "base_lr") r.train.base_lr = json_number(v, path);
                else if (k == "decay_factor") r.train.decay_factor = json_number(v, path);
                else if (k == "decay_every") r.train.decay_every = json_size(v, path);
                else if (k == "batch_size") r.train.batch_size = json_size(v, path);
                else if (k == "seed") r.train.seed = json_size(v, path);
                else if (k == "warm_start") r.train.warm_start = detail::json_get<std::string>(v, path);
                else throw FormatError("unknown config key '" + path + "'");
            } else if (section == "ablate") {
                if (k == "seeds") r.ablate_seeds = detail::json_get<std::vector<std::uint64_t>>(v, path);
                else if (k == "variants") r.ablate_variants = detail::json_get<std::vector<std::string>>(v, path);
                else throw FormatError("unknown config key '" + path + "'");
            } else {
                throw FormatError("unknown config section '" + section + "'");
            }
        }
    }
    r.validate();
    return r;
}

/// Applies "section.key=value" to a config document. The value is parsed as
/// JSON when it can be, and taken as a plain string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    detail::require<FormatError>(eq != std::string::npos && eq > 0, "override '", assignment,
                                 "' is not of the form section.key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    const auto dot = key.find('.');
    detail::require<FormatError>(dot != std::string::npos && dot > 0 && dot + 1 < key.size() &&
                                     key.find('.', dot + 1) == std::string::npos,
                                 "override key '", key, "' must be section.key");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json& section = doc[key.substr(0, dot)];
    if (section.is_null()) section = json::object();
    detail::require_object(section, key.substr(0, dot));
    section[key.substr(dot + 1)] = value;
}

/// Loads `path` (empty: defaults only), applies the overrides in order and
/// validates the result.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        detail::require<FormatError>(static_cast<bool>(in), "cannot open config file '", path, "'");
        std::stringstream buf;
        buf << in.rdbuf();
        doc = json::parse(buf.str(), nullptr, false, true);
        detail::require<FormatError>(!doc.is_discarded(), "config file '", path, "' is not valid JSON");
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return run_config_from_json(doc);
}

}  // namespace vpn
