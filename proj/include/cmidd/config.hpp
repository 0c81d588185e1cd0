#pragma once

// JSON run configuration: defaults, file merge, dotted-key overrides, and
// conversion into the typed configs of the library.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmidd/cmi.hpp"
#include "cmidd/datasets.hpp"
#include "cmidd/distill.hpp"
#include "cmidd/error.hpp"
#include "cmidd/eval.hpp"
#include "cmidd/models.hpp"

namespace cmidd {

using nlohmann::json;

inline json default_mlp_arch() { return {{"kind", "mlp"}, {"hidden_widths", {32, 16}}}; }

/// Every key a config may carry, with its default value.
inline json default_config() {
    return {
        {"seed", nullptr},
        {"data",
         {{"train", ""},
          {"test", ""},
          {"generator",
           {{"num_classes", 3}, {"n_per_class", 500}, {"dim", 2}, {"spread", 0.5}, {"seed", 0}}},
          {"test_per_class", 200},
          {"split_seed", 7}}},
        {"distill",
         {{"objective", "dm"},
          {"lambda", 0.0},
          {"iterations", 500},
          {"lr_synthetic", 1.0},
          {"momentum", 0.0},
          {"cmi_space", "feature"},
          {"cmi_every", 1},
          {"detach_centroid", false},
          {"ipc", 10},
          {"init", "real-sample"},
          {"batch_real", 64},
          {"monitor_every", 0},
          {"pool_spec",
           {{"arch", default_mlp_arch()},
            {"size", 5},
            {"epochs", 30},
            {"lr", 0.05},
            {"batch_size", 64},
            {"momentum", 0.9},
            {"seed", 100}}},
          {"backbone_spec", {{"arch", default_mlp_arch()}, {"size", 5}, {"seed", 200}}},
          {"seeds", {{"init", 0}, {"pool", 1}, {"loop", 2}}}}},
        {"eval",
         {{"archs", json::array({default_mlp_arch()})},
          {"repeats", 5},
          {"epochs", 300},
          {"lr", 0.05},
          {"batch_size", 256},
          {"momentum", 0.9},
          {"base_seed", 1000}}},
        {"score", {{"space", "feature"}}},
        {"embeddings", {{"real_count", 300}, {"seed", 11}}},
        {"paths", {{"synthetic", ""}, {"proxy", ""}, {"pool", ""}}},
    };
}

namespace detail {

// Architecture objects are free-form: their keys are checked by arch_from_json.
inline bool is_opaque(const std::string& key) { return key == "arch" || key == "archs"; }

inline void merge_known(json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object()) throw Error(ErrorKind::usage, "config section '" + prefix + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw Error(ErrorKind::usage, "unknown config key '" + path + "'");
        if (base[key].is_object() && !is_opaque(key))
            merge_known(base[key], value, path);
        else
            base[key] = value;
    }
}

inline json parse_value(const std::string& text) {
    json v = json::parse(text, nullptr, false);
    if (v.is_discarded()) return text;
    return v;
}

}  // namespace detail

/// Applies `patch` over `base`, rejecting keys that `base` does not have.
inline void merge_config(json& base, const json& patch) { detail::merge_known(base, patch, ""); }

/// `a.b.c=value`. The value is read as JSON when it parses, else as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw Error(ErrorKind::usage, "override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        auto dot = key.find('.', start);
        std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(part))
            throw Error(ErrorKind::usage, "unknown config key '" + key + "'");
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = detail::parse_value(assignment.substr(eq + 1));
}

/// `--seed N` fans out into every component seed.
inline void apply_seed(json& cfg, std::uint64_t n) {
    cfg["seed"] = n;
    cfg["data"]["generator"]["seed"] = n;
    cfg["data"]["split_seed"] = n + 7;
    cfg["distill"]["pool_spec"]["seed"] = n + 100;
    cfg["distill"]["backbone_spec"]["seed"] = n + 200;
    cfg["distill"]["seeds"] = {{"init", n}, {"pool", n + 1}, {"loop", n + 2}};
    cfg["eval"]["base_seed"] = n + 1000;
    cfg["embeddings"]["seed"] = n + 11;
}

/// Reads a config file. A `run.json` echo is accepted as well.
inline json load_config_file(const std::filesystem::path& path) {
    json j = detail::read_json_file(path);
    if (j.is_object() && j.contains("command") && j.contains("config")) return j["config"];
    return j;
}

struct ConfigSources {
    std::optional<std::filesystem::path> file;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
};

/// Defaults, then the file, then --seed, then each --set in order.
inline json resolve_config(const ConfigSources& src) {
    json cfg = default_config();
    if (src.file) {
        json file = load_config_file(*src.file);
        merge_config(cfg, file);
        // A seed in the file fans out first; explicit seeds in the file still win.
        if (!src.seed && file.contains("seed") && file["seed"].is_number_unsigned()) {
            apply_seed(cfg, file["seed"].get<std::uint64_t>());
            merge_config(cfg, file);
        }
    }
    if (src.seed) apply_seed(cfg, *src.seed);
    for (const auto& o : src.overrides) apply_override(cfg, o);
    return cfg;
}

// ---- typed views --------------------------------------------------------------

template <class T>
T get_as(const json& j, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::usage, "config key '" + key + "' has the wrong type");
    }
}

inline PoolSpec pool_spec_from(const json& cfg) {
    const json& p = cfg.at("distill").at("pool_spec");
    PoolSpec s;
    s.arch = arch_from_json(p.at("arch"));
    s.size = get_as<int>(p, "size");
    s.train.epochs = get_as<int>(p, "epochs");
    s.train.lr = get_as<double>(p, "lr");
    s.train.batch_size = get_as<std::size_t>(p, "batch_size");
    s.train.momentum = get_as<double>(p, "momentum");
    s.seed = get_as<std::uint64_t>(p, "seed");
    s.sampling_seed = get_as<std::uint64_t>(cfg.at("distill").at("seeds"), "pool");
    return s;
}

inline DistillConfig distill_config_from(const json& cfg) {
    const json& d = cfg.at("distill");
    DistillConfig c;
    c.objective = objective_from_string(get_as<std::string>(d, "objective"));
    c.lambda = get_as<double>(d, "lambda");
    c.iterations = get_as<int>(d, "iterations");
    c.lr_synthetic = get_as<double>(d, "lr_synthetic");
    c.momentum = get_as<double>(d, "momentum");
    c.cmi_space = cmi_space_from_string(get_as<std::string>(d, "cmi_space"));
    c.cmi_every = get_as<int>(d, "cmi_every");
    c.detach_centroid = get_as<bool>(d, "detach_centroid");
    c.ipc = get_as<int>(d, "ipc");
    c.init = init_mode_from_string(get_as<std::string>(d, "init"));
    c.batch_real = get_as<std::size_t>(d, "batch_real");
    c.monitor_every = get_as<int>(d, "monitor_every");
    c.pool_spec = pool_spec_from(cfg);
    const json& b = d.at("backbone_spec");
    c.backbone_spec.arch = arch_from_json(b.at("arch"));
    c.backbone_spec.size = get_as<int>(b, "size");
    c.backbone_spec.seed = get_as<std::uint64_t>(b, "seed");
    const json& s = d.at("seeds");
    c.seeds = {get_as<std::uint64_t>(s, "init"), get_as<std::uint64_t>(s, "pool"), get_as<std::uint64_t>(s, "loop")};
    validate(c);
    return c;
}

inline EvalConfig eval_config_from(const json& cfg) {
    const json& e = cfg.at("eval");
    EvalConfig c;
    for (const auto& a : e.at("archs")) c.archs.push_back(arch_from_json(a));
    c.repeats = get_as<int>(e, "repeats");
    c.train.epochs = get_as<int>(e, "epochs");
    c.train.lr = get_as<double>(e, "lr");
    c.train.batch_size = get_as<std::size_t>(e, "batch_size");
    c.train.momentum = get_as<double>(e, "momentum");
    c.base_seed = get_as<std::uint64_t>(e, "base_seed");
    return c;
}

struct DataSplit {
    LabeledDataset train;
    LabeledDataset test;
};

/// Generated blobs, split into train and test. n_per_class counts the
/// training share; test_per_class more samples are drawn on top.
inline DataSplit generate_data(const json& cfg) {
    const json& d = cfg.at("data");
    const json& g = d.at("generator");
    const int test_per_class = get_as<int>(d, "test_per_class");
    LabeledDataset all = make_blobs(get_as<int>(g, "num_classes"), get_as<int>(g, "n_per_class") + test_per_class,
                                    get_as<int>(g, "dim"), get_as<double>(g, "spread"),
                                    get_as<std::uint64_t>(g, "seed"));
    auto [train, test] =
        split_stratified(all, static_cast<std::size_t>(test_per_class), get_as<std::uint64_t>(d, "split_seed"));
    train.name = "blobs-train";
    test.name = "blobs-test";
    return {std::move(train), std::move(test)};
}

/// Training data from data.train when set, generated otherwise.
inline LabeledDataset training_data(const json& cfg) {
    auto path = get_as<std::string>(cfg.at("data"), "train");
    if (!path.empty()) return load_dataset(path);
    return generate_data(cfg).train;
}

inline LabeledDataset test_data(const json& cfg) {
    auto path = get_as<std::string>(cfg.at("data"), "test");
    if (!path.empty()) return load_dataset(path);
    return generate_data(cfg).test;
}

}  // namespace cmidd
