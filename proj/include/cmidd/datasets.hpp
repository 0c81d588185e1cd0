#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmidd/autodiff.hpp"
#include "cmidd/error.hpp"
#include "cmidd/rng.hpp"

namespace cmidd {

using ad::Matrix;

static_assert(std::endian::native == std::endian::little, "binary payloads assume a little-endian host");

/// Real training data: one flattened sample per row of `samples`.
struct LabeledDataset {
    Matrix samples;
    std::vector<int> labels;
    std::vector<std::size_t> shape;  // per-sample dimensions
    int num_classes = 0;
    std::string name;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_dim() const { return samples.cols; }
};

/// The optimizable synthetic set. Labels are fixed at construction; only
/// `samples` is mutated by distillation.
class SyntheticDataset {
public:
    SyntheticDataset() = default;
    SyntheticDataset(Matrix samples, std::vector<int> labels, std::vector<std::size_t> shape, int num_classes, int ipc)
        : samples(std::move(samples)), labels_(std::move(labels)), shape_(std::move(shape)),
          num_classes_(num_classes), ipc_(ipc) {
        validate();
    }

    Matrix samples;

    const std::vector<int>& labels() const { return labels_; }
    const std::vector<std::size_t>& shape() const { return shape_; }
    int num_classes() const { return num_classes_; }
    int ipc() const { return ipc_; }
    std::size_t size() const { return labels_.size(); }

private:
    void validate() const {
        if (num_classes_ < 1 || ipc_ < 1) throw Error(ErrorKind::invalid_argument, "synthetic set needs C, ipc >= 1");
        if (labels_.size() != static_cast<std::size_t>(num_classes_) * static_cast<std::size_t>(ipc_))
            throw Error(ErrorKind::manifest_mismatch, "synthetic set size must equal C * ipc");
        if (samples.rows != labels_.size()) throw Error(ErrorKind::size_mismatch, "one sample row per label");
        std::vector<int> counts(static_cast<std::size_t>(num_classes_), 0);
        for (int y : labels_) {
            if (y < 0 || y >= num_classes_) throw Error(ErrorKind::label_out_of_range, "synthetic label");
            ++counts[static_cast<std::size_t>(y)];
        }
        for (int c : counts)
            if (c != ipc_) throw Error(ErrorKind::manifest_mismatch, "every class must carry exactly ipc samples");
    }

    std::vector<int> labels_;
    std::vector<std::size_t> shape_;
    int num_classes_ = 0;
    int ipc_ = 0;
};

struct Normalization {
    std::vector<double> mean;
    std::vector<double> std;
};

struct DatasetManifest {
    std::vector<std::size_t> shape;
    std::string dtype = "f32";
    int num_classes = 0;
    std::size_t count = 0;
    Normalization normalization;
    std::string name;
    int ipc = 0;  // only written for synthetic sets

    std::size_t sample_numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["shape"] = m.shape;
    j["dtype"] = m.dtype;
    j["num_classes"] = m.num_classes;
    j["count"] = m.count;
    j["normalization"] = {{"mean", m.normalization.mean}, {"std", m.normalization.std}};
    if (!m.name.empty()) j["name"] = m.name;
    if (m.ipc > 0) j["ipc"] = m.ipc;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.shape = j.at("shape").get<std::vector<std::size_t>>();
        m.dtype = j.at("dtype").get<std::string>();
        m.num_classes = j.at("num_classes").get<int>();
        m.count = j.at("count").get<std::size_t>();
        if (j.contains("normalization")) {
            const auto& n = j.at("normalization");
            m.normalization.mean = n.value("mean", std::vector<double>{});
            m.normalization.std = n.value("std", std::vector<double>{});
        }
        m.name = j.value("name", std::string{});
        m.ipc = j.value("ipc", 0);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::manifest_mismatch, std::string("malformed manifest: ") + e.what());
    }
    if (m.dtype != "f32" && m.dtype != "f64") throw Error(ErrorKind::manifest_mismatch, "unsupported dtype " + m.dtype);
    if (m.shape.empty()) throw Error(ErrorKind::manifest_mismatch, "manifest shape must have rank >= 1");
    return m;
}

// ---- generators -----------------------------------------------------------

/// Isotropic Gaussian clusters, one per class, ordered class-major.
inline LabeledDataset make_blobs(int num_classes, int n_per_class, int dim, double spread, std::uint64_t seed) {
    if (num_classes < 2 || n_per_class < 1 || dim < 2 || !(spread > 0.0))
        throw Error(ErrorKind::invalid_argument, "make_blobs requires C >= 2, n >= 1, dim >= 2, spread > 0");
    Rng center_rng = make_rng({seed, 0});
    Rng sample_rng = make_rng({seed, 1});
    std::uniform_real_distribution<double> center_dist(-3.0, 3.0);
    std::normal_distribution<double> noise(0.0, spread);

    const auto d = static_cast<std::size_t>(dim);
    Matrix centers(static_cast<std::size_t>(num_classes), d);
    for (auto& v : centers.data) v = center_dist(center_rng);

    LabeledDataset out;
    out.samples = Matrix(static_cast<std::size_t>(num_classes * n_per_class), d);
    out.labels.reserve(out.samples.rows);
    for (int c = 0; c < num_classes; ++c) {
        for (int i = 0; i < n_per_class; ++i) {
            std::size_t r = out.labels.size();
            for (std::size_t k = 0; k < d; ++k) out.samples(r, k) = centers(static_cast<std::size_t>(c), k) + noise(sample_rng);
            out.labels.push_back(c);
        }
    }
    out.shape = {d};
    out.num_classes = num_classes;
    out.name = "blobs";
    return out;
}

inline LabeledDataset subset(const LabeledDataset& d, std::span<const std::size_t> indices) {
    LabeledDataset out;
    out.samples = Matrix(indices.size(), d.sample_dim());
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        auto src = d.samples.row(indices[i]);
        std::copy(src.begin(), src.end(), out.samples.row(i).begin());
        out.labels.push_back(d.labels[indices[i]]);
    }
    out.shape = d.shape;
    out.num_classes = d.num_classes;
    out.name = d.name;
    return out;
}

// ---- class views ----------------------------------------------------------

/// Class id -> sample indices, each list in original order.
inline std::map<int, std::vector<std::size_t>> partition_by_class(std::span<const int> labels) {
    std::map<int, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
    return out;
}

inline std::map<int, std::vector<std::size_t>> partition_by_class(const LabeledDataset& d) {
    return partition_by_class(std::span<const int>(d.labels));
}

/// Stratified split; `test_per_class` samples of each class go to the test side.
inline std::pair<LabeledDataset, LabeledDataset> split_stratified(const LabeledDataset& d, std::size_t test_per_class,
                                                                  std::uint64_t seed) {
    std::vector<std::size_t> train_idx, test_idx;
    for (const auto& [label, idx] : partition_by_class(d)) {
        if (idx.size() <= test_per_class)
            throw Error(ErrorKind::insufficient_samples, "class " + std::to_string(label) + " too small to split");
        Rng rng = make_rng({seed, static_cast<std::uint64_t>(label)});
        auto picked = sample_without_replacement(idx.size(), test_per_class, rng);
        std::vector<bool> is_test(idx.size(), false);
        for (auto p : picked) is_test[p] = true;
        for (std::size_t i = 0; i < idx.size(); ++i) (is_test[i] ? test_idx : train_idx).push_back(idx[i]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    return {subset(d, train_idx), subset(d, test_idx)};
}

inline void validate(const LabeledDataset& d) {
    if (d.num_classes < 1) throw Error(ErrorKind::invalid_argument, "dataset needs at least one class");
    if (d.samples.rows != d.labels.size()) throw Error(ErrorKind::size_mismatch, "one sample row per label");
    std::vector<int> counts(static_cast<std::size_t>(d.num_classes), 0);
    for (int y : d.labels) {
        if (y < 0 || y >= d.num_classes)
            throw Error(ErrorKind::label_out_of_range, "label " + std::to_string(y) + " outside [0, C)");
        ++counts[static_cast<std::size_t>(y)];
    }
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0) throw Error(ErrorKind::empty_class, "class " + std::to_string(c) + " has no samples");
    for (double v : d.samples.data)
        if (!std::isfinite(v)) throw Error(ErrorKind::non_finite, "dataset contains non-finite values");
}

// ---- synthetic initialization --------------------------------------------

enum class InitMode { noise, real_sample };

inline InitMode init_mode_from_string(const std::string& s) {
    if (s == "noise") return InitMode::noise;
    if (s == "real-sample" || s == "real_sample" || s == "real") return InitMode::real_sample;
    throw Error(ErrorKind::invalid_argument, "unknown init mode " + s);
}

inline std::vector<double> per_dimension_std(const LabeledDataset& d) {
    const std::size_t n = d.size(), k = d.sample_dim();
    std::vector<double> mean(k, 0.0), var(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) mean[j] += d.samples(i, j);
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            double diff = d.samples(i, j) - mean[j];
            var[j] += diff * diff;
        }
    for (auto& v : var) v = std::sqrt(v / static_cast<double>(n));
    return var;
}

/// Balanced synthetic set, class-major ordering (ipc rows of class 0, then class 1, ...).
inline SyntheticDataset init_synthetic(const LabeledDataset& real, int ipc, InitMode mode, std::uint64_t seed) {
    if (ipc < 1) throw Error(ErrorKind::invalid_argument, "ipc must be >= 1");
    const std::size_t k = real.sample_dim();
    const auto per = static_cast<std::size_t>(ipc);
    auto classes = partition_by_class(real);
    Matrix samples(static_cast<std::size_t>(real.num_classes) * per, k);
    std::vector<int> labels;
    labels.reserve(samples.rows);

    if (mode == InitMode::real_sample) {
        for (int c = 0; c < real.num_classes; ++c) {
            auto it = classes.find(c);
            std::size_t available = it == classes.end() ? 0 : it->second.size();
            if (available < per)
                throw Error(ErrorKind::insufficient_samples, "class " + std::to_string(c) + " has " +
                                                                 std::to_string(available) + " samples, ipc is " +
                                                                 std::to_string(ipc));
            Rng rng = make_rng({seed, static_cast<std::uint64_t>(c)});
            for (auto p : sample_without_replacement(available, per, rng)) {
                auto src = real.samples.row(it->second[p]);
                std::copy(src.begin(), src.end(), samples.row(labels.size()).begin());
                labels.push_back(c);
            }
        }
    } else {
        auto sd = per_dimension_std(real);
        Rng rng = make_rng({seed});
        std::normal_distribution<double> normal(0.0, 1.0);
        for (int c = 0; c < real.num_classes; ++c) {
            for (std::size_t i = 0; i < per; ++i) {
                auto row = samples.row(labels.size());
                for (std::size_t j = 0; j < k; ++j) row[j] = normal(rng) * sd[j];
                labels.push_back(c);
            }
        }
    }
    return SyntheticDataset(std::move(samples), std::move(labels), real.shape, real.num_classes, ipc);
}

// ---- binary I/O -----------------------------------------------------------

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw Error(ErrorKind::missing_file, p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::manifest_mismatch, p.string() + ": " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
    std::ofstream out(p);
    if (!out) throw Error(ErrorKind::io, "cannot write " + p.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed for " + p.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorKind::missing_file, p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const void* data, std::size_t n) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error(ErrorKind::io, "cannot write " + p.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw Error(ErrorKind::io, "write failed for " + p.string());
}

inline void ensure_directory(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

inline std::vector<double> decode_floats(const std::vector<char>& bytes, const std::string& dtype) {
    std::vector<double> out;
    if (dtype == "f32") {
        out.resize(bytes.size() / 4);
        for (std::size_t i = 0; i < out.size(); ++i) {
            float f;
            std::memcpy(&f, bytes.data() + 4 * i, 4);
            out[i] = f;
        }
    } else {
        out.resize(bytes.size() / 8);
        std::memcpy(out.data(), bytes.data(), out.size() * 8);
    }
    return out;
}

inline std::vector<char> encode_floats(std::span<const double> values, const std::string& dtype) {
    std::vector<char> out;
    if (dtype == "f32") {
        out.resize(values.size() * 4);
        for (std::size_t i = 0; i < values.size(); ++i) {
            float f = static_cast<float>(values[i]);
            std::memcpy(out.data() + 4 * i, &f, 4);
        }
    } else {
        out.resize(values.size() * 8);
        std::memcpy(out.data(), values.data(), out.size());
    }
    return out;
}

struct RawPayload {
    DatasetManifest manifest;
    Matrix samples;
    std::vector<int> labels;
};

inline RawPayload read_payload(const std::filesystem::path& dir) {
    RawPayload raw;
    raw.manifest = manifest_from_json(read_json_file(dir / "manifest.json"));
    const auto& m = raw.manifest;
    const std::size_t numel = m.sample_numel();
    const std::size_t width = m.dtype == "f32" ? 4 : 8;

    auto sample_bytes = read_bytes(dir / "samples.bin");
    auto label_bytes = read_bytes(dir / "labels.bin");
    if (sample_bytes.size() != m.count * numel * width)
        throw Error(ErrorKind::size_mismatch, "samples.bin holds " + std::to_string(sample_bytes.size()) +
                                                  " bytes, manifest implies " + std::to_string(m.count * numel * width));
    if (label_bytes.size() != m.count * 4)
        throw Error(ErrorKind::size_mismatch, "labels.bin holds " + std::to_string(label_bytes.size()) +
                                                  " bytes, manifest implies " + std::to_string(m.count * 4));

    raw.samples = Matrix(m.count, numel, decode_floats(sample_bytes, m.dtype));
    raw.labels.resize(m.count);
    for (std::size_t i = 0; i < m.count; ++i) {
        std::uint32_t y;
        std::memcpy(&y, label_bytes.data() + 4 * i, 4);
        if (y >= static_cast<std::uint32_t>(m.num_classes))
            throw Error(ErrorKind::label_out_of_range,
                        "label " + std::to_string(y) + " at index " + std::to_string(i) + " outside [0, " +
                            std::to_string(m.num_classes) + ")");
        raw.labels[i] = static_cast<int>(y);
    }
    return raw;
}

inline void write_payload(const std::filesystem::path& dir, const DatasetManifest& m, const Matrix& samples,
                          std::span<const int> labels) {
    ensure_directory(dir);
    auto bytes = encode_floats(samples.data, m.dtype);
    std::vector<std::uint32_t> raw_labels(labels.begin(), labels.end());
    write_bytes(dir / "samples.bin", bytes.data(), bytes.size());
    write_bytes(dir / "labels.bin", raw_labels.data(), raw_labels.size() * 4);
    write_json_file(dir / "manifest.json", to_json(m));
}

/// (x - mean[c]) / std[c] where c is the index along the leading axis.
inline void apply_normalization(Matrix& samples, const DatasetManifest& m) {
    const auto& norm = m.normalization;
    if (norm.mean.empty() && norm.std.empty()) return;
    const std::size_t channels = m.shape.front();
    const std::size_t per_channel = m.sample_numel() / channels;
    auto pick = [&](const std::vector<double>& v, double fallback, std::size_t c) {
        if (v.empty()) return fallback;
        if (v.size() == 1) return v[0];
        if (v.size() != channels) throw Error(ErrorKind::manifest_mismatch, "normalization length must be 1 or shape[0]");
        return v[c];
    };
    for (std::size_t c = 0; c < channels; ++c)
        if (!(pick(norm.std, 1.0, c) > 0.0)) throw Error(ErrorKind::manifest_mismatch, "normalization std must be > 0");
    for (std::size_t r = 0; r < samples.rows; ++r) {
        auto row = samples.row(r);
        for (std::size_t i = 0; i < row.size(); ++i) {
            std::size_t c = i / per_channel;
            row[i] = (row[i] - pick(norm.mean, 0.0, c)) / pick(norm.std, 1.0, c);
        }
    }
}

}  // namespace detail

inline LabeledDataset load_dataset(const std::filesystem::path& dir) {
    auto raw = detail::read_payload(dir);
    detail::apply_normalization(raw.samples, raw.manifest);
    LabeledDataset d;
    d.samples = std::move(raw.samples);
    d.labels = std::move(raw.labels);
    d.shape = raw.manifest.shape;
    d.num_classes = raw.manifest.num_classes;
    d.name = raw.manifest.name.empty() ? dir.filename().string() : raw.manifest.name;
    validate(d);
    return d;
}

/// Writes values as-is with identity normalization, so load_dataset reproduces them.
inline void save_dataset(const LabeledDataset& d, const std::filesystem::path& dir, const std::string& dtype = "f32") {
    DatasetManifest m;
    m.shape = d.shape;
    m.dtype = dtype;
    m.num_classes = d.num_classes;
    m.count = d.size();
    m.normalization = {{0.0}, {1.0}};
    m.name = d.name;
    detail::write_payload(dir, m, d.samples, d.labels);
}

/// Synthetic checkpoints default to f64 so the round trip is bit-exact.
inline void save_synthetic(const SyntheticDataset& s, const std::filesystem::path& dir, const std::string& dtype = "f64") {
    DatasetManifest m;
    m.shape = s.shape();
    m.dtype = dtype;
    m.num_classes = s.num_classes();
    m.count = s.size();
    m.name = "synthetic";
    m.ipc = s.ipc();
    detail::write_payload(dir, m, s.samples, s.labels());
}

/// When `expected_classes` > 0 the checkpoint must declare that many classes.
inline SyntheticDataset load_synthetic(const std::filesystem::path& dir, int expected_classes = 0) {
    auto raw = detail::read_payload(dir);
    const auto& m = raw.manifest;
    if (expected_classes > 0 && m.num_classes != expected_classes)
        throw Error(ErrorKind::manifest_mismatch, "checkpoint declares " + std::to_string(m.num_classes) +
                                                      " classes, expected " + std::to_string(expected_classes));
    int ipc = m.ipc;
    if (ipc <= 0) {
        if (m.num_classes <= 0 || m.count % static_cast<std::size_t>(m.num_classes) != 0)
            throw Error(ErrorKind::manifest_mismatch, "cannot infer ipc from manifest");
        ipc = static_cast<int>(m.count / static_cast<std::size_t>(m.num_classes));
    }
    detail::apply_normalization(raw.samples, m);
    return SyntheticDataset(std::move(raw.samples), std::move(raw.labels), m.shape, m.num_classes, ipc);
}

}  // namespace cmidd
