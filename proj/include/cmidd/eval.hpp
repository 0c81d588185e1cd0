#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmidd/cmi.hpp"
#include "cmidd/datasets.hpp"
#include "cmidd/error.hpp"
#include "cmidd/models.hpp"
#include "cmidd/parallel.hpp"

namespace cmidd {

struct EvalConfig {
    std::vector<ArchSpec> archs;
    int repeats = 5;
    TrainOptions train{300, 0.05, 256, 0.9, 1e3};
    std::uint64_t base_seed = 1000;
};

inline nlohmann::json to_json(const EvalConfig& c) {
    nlohmann::json archs = nlohmann::json::array();
    for (const auto& a : c.archs) archs.push_back(to_json(a));
    return {{"archs", archs},
            {"repeats", c.repeats},
            {"epochs", c.train.epochs},
            {"lr", c.train.lr},
            {"batch_size", c.train.batch_size},
            {"momentum", c.train.momentum},
            {"base_seed", c.base_seed}};
}

struct ArchEval {
    std::string name;
    ArchSpec arch;
    double mean_top1 = 0.0;
    double std_top1 = 0.0;
    std::vector<double> per_seed;
    std::vector<std::uint64_t> seeds;
};

struct EvalReport {
    std::vector<ArchEval> archs;
    std::string fingerprint;
    nlohmann::json config;
};

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json archs = nlohmann::json::array();
    for (const auto& a : r.archs)
        archs.push_back({{"name", a.name},
                         {"arch", to_json(a.arch)},
                         {"mean_top1", a.mean_top1},
                         {"std_top1", a.std_top1},
                         {"per_seed", a.per_seed},
                         {"seeds", a.seeds}});
    return {{"archs", archs}, {"synthetic_fingerprint", r.fingerprint}, {"config", r.config}};
}

/// FNV-1a over the sample bytes, labels and ipc.
inline std::string fingerprint(const SyntheticDataset& s) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    feed(s.samples.data.data(), s.samples.size() * sizeof(double));
    feed(s.labels().data(), s.labels().size() * sizeof(int));
    int ipc = s.ipc();
    feed(&ipc, sizeof ipc);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Fresh network from `seed`, trained by cross-entropy on `s` only.
inline TrainedProxy train_on_synthetic(const SyntheticDataset& s, const ArchSpec& arch, std::uint64_t seed,
                                       const TrainOptions& opt) {
    TrainedProxy net = build_model(resolve_for(arch, s.shape(), s.num_classes()), seed);
    net.meta.train_accuracy = train_classifier(net, s.samples, s.labels(), opt, seed);
    net.meta.pretrained = opt.epochs > 0;
    net.meta.epochs = opt.epochs;
    return net;
}

inline double top1_accuracy(const TrainedProxy& net, const LabeledDataset& test) {
    if (test.size() == 0) throw Error(ErrorKind::invalid_argument, "top-1 accuracy on an empty test set");
    if (test.sample_dim() != net.arch.input_dim())
        throw Error(ErrorKind::shape_mismatch, "test samples do not match the network input");
    return accuracy_on(net, test.samples, test.labels);
}

/// Mean and population standard deviation.
inline std::pair<double, double> mean_and_std(std::span<const double> v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

inline EvalReport repeated_eval(const SyntheticDataset& s, const EvalConfig& cfg, const LabeledDataset& test) {
    if (cfg.repeats < 1) throw Error(ErrorKind::invalid_argument, "repeats must be >= 1");
    if (cfg.archs.empty()) throw Error(ErrorKind::invalid_argument, "no architectures to evaluate");
    const auto reps = static_cast<std::size_t>(cfg.repeats);
    std::vector<double> acc(cfg.archs.size() * reps);
    parallel_for(acc.size(), [&](std::size_t job) {
        const auto& arch = cfg.archs[job / reps];
        std::uint64_t seed = cfg.base_seed + job % reps;
        acc[job] = top1_accuracy(train_on_synthetic(s, arch, seed, cfg.train), test);
    });

    EvalReport report;
    report.fingerprint = fingerprint(s);
    report.config = to_json(cfg);
    for (std::size_t a = 0; a < cfg.archs.size(); ++a) {
        ArchEval e;
        e.arch = resolve_for(cfg.archs[a], s.shape(), s.num_classes());
        e.name = arch_name(e.arch);
        e.per_seed.assign(acc.begin() + static_cast<long>(a * reps), acc.begin() + static_cast<long>((a + 1) * reps));
        for (std::size_t i = 0; i < reps; ++i) e.seeds.push_back(cfg.base_seed + i);
        std::tie(e.mean_top1, e.std_top1) = mean_and_std(e.per_seed);
        report.archs.push_back(std::move(e));
    }
    return report;
}

// ---- embeddings -------------------------------------------------------------

struct EmbeddingDump {
    std::vector<std::string> source;
    std::vector<int> labels;
    Matrix features;
    Matrix simplex;
};

inline EmbeddingDump compute_embeddings(const SyntheticDataset& s, const LabeledDataset& real_subset,
                                        const TrainedProxy& proxy) {
    EmbeddingDump dump;
    Matrix syn_features = extract_features(proxy, s.samples);
    Matrix real_features = real_subset.size() ? extract_features(proxy, real_subset.samples)
                                              : Matrix(0, static_cast<std::size_t>(proxy.arch.feature_dim));
    const std::size_t m = syn_features.cols, n = s.size() + real_subset.size();
    dump.features = Matrix(n, m);
    dump.simplex = Matrix(n, m);
    auto put = [&](std::size_t row, std::span<const double> f) {
        std::copy(f.begin(), f.end(), dump.features.row(row).begin());
        auto p = feature_softmax(f);
        std::copy(p.p.begin(), p.p.end(), dump.simplex.row(row).begin());
    };
    for (std::size_t i = 0; i < s.size(); ++i) {
        put(i, syn_features.row(i));
        dump.source.emplace_back("synthetic");
        dump.labels.push_back(s.labels()[i]);
    }
    for (std::size_t i = 0; i < real_subset.size(); ++i) {
        put(s.size() + i, real_features.row(i));
        dump.source.emplace_back("real");
        dump.labels.push_back(real_subset.labels[i]);
    }
    return dump;
}

inline void write_embeddings(const EmbeddingDump& dump, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    const std::size_t m = dump.features.cols;
    out << "source,label";
    for (std::size_t j = 0; j < m; ++j) out << ",feat_" << j;
    for (std::size_t j = 0; j < m; ++j) out << ",simplex_" << j;
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < dump.labels.size(); ++i) {
        out << dump.source[i] << ',' << dump.labels[i];
        for (double v : dump.features.row(i)) {
            std::snprintf(buf, sizeof buf, "%.9g", v);
            out << ',' << buf;
        }
        for (double v : dump.simplex.row(i)) {
            std::snprintf(buf, sizeof buf, "%.9g", v);
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

inline EmbeddingDump export_embeddings(const SyntheticDataset& s, const LabeledDataset& real_subset,
                                       const TrainedProxy& proxy, const std::filesystem::path& path) {
    EmbeddingDump dump = compute_embeddings(s, real_subset, proxy);
    write_embeddings(dump, path);
    return dump;
}

inline EmbeddingDump read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::missing_file, path.string());
    std::string line;
    std::getline(in, line);
    std::size_t fields = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (fields < 4 || (fields - 2) % 2 != 0) throw Error(ErrorKind::manifest_mismatch, "bad embedding header");
    const std::size_t m = (fields - 2) / 2;
    EmbeddingDump dump;
    std::vector<double> feats, simplex;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        dump.source.push_back(tok);
        std::getline(ss, tok, ',');
        dump.labels.push_back(std::stoi(tok));
        for (std::size_t j = 0; j < 2 * m; ++j) {
            if (!std::getline(ss, tok, ',')) throw Error(ErrorKind::size_mismatch, "short embedding row");
            (j < m ? feats : simplex).push_back(std::stod(tok));
        }
    }
    dump.features = Matrix(dump.labels.size(), m, std::move(feats));
    dump.simplex = Matrix(dump.labels.size(), m, std::move(simplex));
    return dump;
}

// ---- CMI across a pool -------------------------------------------------------

inline std::vector<CmiReport> cmi_trace(const SyntheticDataset& s, const ModelPool& pool, CmiSpace space) {
    if (pool.proxies.empty()) throw Error(ErrorKind::empty_pool, "cmi_trace needs at least one proxy");
    std::vector<CmiReport> out(pool.proxies.size());
    parallel_for(out.size(), [&](std::size_t i) { out[i] = empirical_cmi(s, pool.proxies[i], space); });
    return out;
}

}  // namespace cmidd
