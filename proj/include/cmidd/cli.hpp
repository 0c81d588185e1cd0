#pragma once

// Command-line front end. Each subcommand resolves the JSON config, calls into
// the library and writes its artifacts plus a run.json echo under --out.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cmidd/cmi.hpp"
#include "cmidd/config.hpp"
#include "cmidd/datasets.hpp"
#include "cmidd/distill.hpp"
#include "cmidd/error.hpp"
#include "cmidd/eval.hpp"
#include "cmidd/models.hpp"

namespace cmidd::cli {

namespace fs = std::filesystem;

enum ExitCode { ok = 0, usage_error = 1, runtime_error = 2 };

inline const char* synopsis() {
    return "usage: cmidd <command> [--config PATH] [--out DIR] [--set key=value]... [--seed N]\n"
           "commands:\n"
           "  gen-toy            generate blobs and write train/ and test/\n"
           "  pretrain           train the proxy pool and write pool/\n"
           "  distill            distill a synthetic set and write synthetic/ and trace.jsonl\n"
           "  score              CMI of --synthetic under --proxy (or every member of --pool)\n"
           "  eval               train fresh networks on --synthetic and report test top-1\n"
           "  export-embeddings  features and simplex images of synthetic and real samples\n";
}

struct Invocation {
    std::string command;
    ConfigSources sources;
    std::string out;
    std::string synthetic, proxy, pool, train, test, space;
};

namespace detail {

inline void echo_run(const fs::path& out, const Invocation& inv, const json& cfg) {
    cmidd::detail::ensure_directory(out);
    cmidd::detail::write_json_file(out / "run.json", {{"command", inv.command}, {"config", cfg}});
}

inline std::string need(const json& cfg, const char* key, const char* flag) {
    std::string v = cfg.at("paths").at(key).get<std::string>();
    if (v.empty()) throw Error(ErrorKind::usage, std::string("missing ") + flag);
    return v;
}

inline int gen_toy(const Invocation& inv, const json& cfg, std::ostream& out) {
    fs::path dir = inv.out;
    DataSplit split = generate_data(cfg);
    save_dataset(split.train, dir / "train");
    save_dataset(split.test, dir / "test");
    echo_run(dir, inv, cfg);
    out << json{{"train", split.train.size()}, {"test", split.test.size()}}.dump() << '\n';
    return ok;
}

inline int pretrain_cmd(const Invocation& inv, const json& cfg, std::ostream& out) {
    fs::path dir = inv.out;
    LabeledDataset real = training_data(cfg);
    BuiltPool built = build_pool(pool_spec_from(cfg), real);
    save_pool(built, dir / "pool");
    echo_run(dir, inv, cfg);
    json acc = json::array();
    for (const auto& p : built.pool.proxies) acc.push_back({{"id", p.id}, {"train_accuracy", p.meta.train_accuracy}});
    out << json{{"proxies", acc}, {"monitor", built.monitor.id}}.dump() << '\n';
    return ok;
}

inline int distill_cmd(const Invocation& inv, const json& cfg, std::ostream& out) {
    fs::path dir = inv.out;
    DistillConfig dc = distill_config_from(cfg);
    LabeledDataset real = training_data(cfg);
    std::optional<BuiltPool> prebuilt;
    std::string pool_dir = cfg.at("paths").at("pool").get<std::string>();
    if (!pool_dir.empty()) prebuilt = load_pool(pool_dir);
    DistillPools pools = make_pools(real, dc, prebuilt);
    echo_run(dir, inv, cfg);
    try {
        DistillResult r = run_distillation(real, dc, pools);
        save_synthetic(r.synthetic, dir / "synthetic");
        write_trace(r.trace, dir / "trace.jsonl");
        json summary = {{"initial_monitor_cmi", r.trace.initial_monitor_cmi()},
                        {"final_monitor_cmi", r.trace.final_monitor_cmi()},
                        {"final_l_dd", r.trace.steps.back().l_dd},
                        {"mean_wall_ms", r.trace.mean_wall_ms()},
                        {"fingerprint", fingerprint(r.synthetic)}};
        cmidd::detail::write_json_file(dir / "summary.json", summary);
        out << summary.dump() << '\n';
    } catch (const DistillError& e) {
        write_trace(e.trace, dir / "trace.jsonl");
        throw;
    }
    return ok;
}

inline int score_cmd(const Invocation& inv, const json& cfg, std::ostream& out) {
    SyntheticDataset s = load_synthetic(need(cfg, "synthetic", "--synthetic"));
    CmiSpace space = cmi_space_from_string(cfg.at("score").at("space").get<std::string>());
    std::string proxy_dir = cfg.at("paths").at("proxy").get<std::string>();
    std::string pool_dir = cfg.at("paths").at("pool").get<std::string>();
    json result;
    if (!proxy_dir.empty()) {
        result = to_json(empirical_cmi(s, load_proxy(proxy_dir), space));
    } else if (!pool_dir.empty()) {
        result = json::array();
        for (const auto& r : cmi_trace(s, load_pool(pool_dir).pool, space)) result.push_back(to_json(r));
    } else {
        throw Error(ErrorKind::usage, "score needs --proxy or --pool");
    }
    if (!inv.out.empty()) {
        echo_run(inv.out, inv, cfg);
        cmidd::detail::write_json_file(fs::path(inv.out) / "cmi_report.json", result);
    }
    out << result.dump() << '\n';
    return ok;
}

inline int eval_cmd(const Invocation& inv, const json& cfg, std::ostream& out) {
    fs::path dir = inv.out;
    SyntheticDataset s = load_synthetic(need(cfg, "synthetic", "--synthetic"));
    LabeledDataset test = test_data(cfg);
    EvalReport report = repeated_eval(s, eval_config_from(cfg), test);
    echo_run(dir, inv, cfg);
    json j = to_json(report);
    cmidd::detail::write_json_file(dir / "eval_report.json", j);
    out << j.dump() << '\n';
    return ok;
}

inline int export_cmd(const Invocation& inv, const json& cfg, std::ostream& out) {
    fs::path dir = inv.out;
    SyntheticDataset s = load_synthetic(need(cfg, "synthetic", "--synthetic"));
    TrainedProxy proxy = load_proxy(need(cfg, "proxy", "--proxy"));
    LabeledDataset real = training_data(cfg);
    const auto count = std::min(cfg.at("embeddings").at("real_count").get<std::size_t>(), real.size());
    Rng rng = make_rng({cfg.at("embeddings").at("seed").get<std::uint64_t>()});
    auto picked = sample_without_replacement(real.size(), count, rng);
    std::sort(picked.begin(), picked.end());
    echo_run(dir, inv, cfg);
    EmbeddingDump dump = export_embeddings(s, subset(real, picked), proxy, dir / "embeddings.csv");
    out << json{{"rows", dump.labels.size()}, {"path", (dir / "embeddings.csv").string()}}.dump() << '\n';
    return ok;
}

}  // namespace detail

/// Parses argv into an Invocation. Throws CLI::ParseError on bad flags.
inline Invocation parse(int argc, const char* const* argv) {
    Invocation inv;
    CLI::App app{"dataset distillation with a class-aware CMI regularizer", "cmidd"};
    app.require_subcommand(1, 1);
    std::string config;
    std::optional<std::uint64_t> seed;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "JSON config file (or a run.json echo)");
        sub->add_option("--out", inv.out, "output directory");
        sub->add_option("--set", inv.sources.overrides, "override key=value")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        sub->add_option("--seed", seed, "seed shorthand");
        sub->add_option("--train", inv.train, "training dataset directory");
    };
    auto* gen = app.add_subcommand("gen-toy", "generate blobs");
    common(gen);
    auto* pre = app.add_subcommand("pretrain", "train the proxy pool");
    common(pre);
    auto* dis = app.add_subcommand("distill", "run distillation");
    common(dis);
    dis->add_option("--pool", inv.pool, "pretrained pool directory");
    auto* score = app.add_subcommand("score", "CMI of a synthetic set");
    common(score);
    score->add_option("--synthetic", inv.synthetic)->required();
    score->add_option("--proxy", inv.proxy);
    score->add_option("--pool", inv.pool);
    score->add_option("--space", inv.space)->check(CLI::IsMember({"feature", "probability"}));
    auto* ev = app.add_subcommand("eval", "evaluate a synthetic set");
    common(ev);
    ev->add_option("--synthetic", inv.synthetic)->required();
    ev->add_option("--test", inv.test, "test dataset directory");
    auto* ex = app.add_subcommand("export-embeddings", "dump embeddings");
    common(ex);
    ex->add_option("--synthetic", inv.synthetic)->required();
    ex->add_option("--proxy", inv.proxy)->required();

    for (auto* sub : {gen, pre, dis, ev, ex}) sub->callback([&inv, sub] { inv.command = sub->get_name(); });
    score->callback([&inv] { inv.command = "score"; });
    app.parse(argc, argv);
    if (!config.empty()) inv.sources.file = config;
    inv.sources.seed = seed;
    if (inv.command != "score" && inv.out.empty()) throw CLI::RequiredError("--out");
    return inv;
}

/// Folds the path flags into the config so that run.json is self-contained.
inline json resolve(const Invocation& inv) {
    json cfg = resolve_config(inv.sources);
    auto put = [&](const std::string& value, const char* section, const char* key) {
        if (!value.empty()) cfg[section][key] = value;
    };
    put(inv.synthetic, "paths", "synthetic");
    put(inv.proxy, "paths", "proxy");
    put(inv.pool, "paths", "pool");
    put(inv.train, "data", "train");
    put(inv.test, "data", "test");
    put(inv.space, "score", "space");
    return cfg;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    Invocation inv;
    try {
        inv = parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << synopsis();
        return ok;
    } catch (const CLI::CallForAllHelp&) {
        out << synopsis();
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "cmidd: " << e.what() << '\n' << synopsis();
        return usage_error;
    }
    try {
        json cfg = resolve(inv);
        if (inv.command == "gen-toy") return detail::gen_toy(inv, cfg, out);
        if (inv.command == "pretrain") return detail::pretrain_cmd(inv, cfg, out);
        if (inv.command == "distill") return detail::distill_cmd(inv, cfg, out);
        if (inv.command == "score") return detail::score_cmd(inv, cfg, out);
        if (inv.command == "eval") return detail::eval_cmd(inv, cfg, out);
        if (inv.command == "export-embeddings") return detail::export_cmd(inv, cfg, out);
        err << synopsis();
        return usage_error;
    } catch (const Error& e) {
        err << "cmidd: " << e.what() << '\n';
        if (e.kind() == ErrorKind::usage) {
            err << synopsis();
            return usage_error;
        }
        return runtime_error;
    } catch (const std::exception& e) {
        err << "cmidd: " << e.what() << '\n';
        return runtime_error;
    }
}

}  // namespace cmidd::cli
