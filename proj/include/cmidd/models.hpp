#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmidd/autodiff.hpp"
#include "cmidd/datasets.hpp"
#include "cmidd/error.hpp"
#include "cmidd/parallel.hpp"
#include "cmidd/rng.hpp"

namespace cmidd {

enum class ArchKind { mlp, convnet };

/// Network layout. The extractor h ends in an M-wide tanh layer; the head l
/// is a single affine map M -> C.
struct ArchSpec {
    ArchKind kind = ArchKind::mlp;
    std::vector<std::size_t> input_shape;
    std::vector<int> hidden_widths;  // mlp
    int blocks = 2;                  // convnet
    int channels = 8;                // convnet
    int feature_dim = 0;             // M
    int num_classes = 0;             // C
    std::string activation = "tanh";

    std::size_t input_dim() const {
        return std::accumulate(input_shape.begin(), input_shape.end(), std::size_t{1}, std::multiplies<>());
    }
    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

inline std::string arch_name(const ArchSpec& a) {
    if (a.kind == ArchKind::convnet)
        return "convnet-" + std::to_string(a.blocks) + "x" + std::to_string(a.channels) + "-m" +
               std::to_string(a.feature_dim);
    std::string s = "mlp";
    for (int w : a.hidden_widths) s += "-" + std::to_string(w);
    return s;
}

inline void validate(const ArchSpec& a) {
    auto fail = [](const std::string& why) { throw Error(ErrorKind::invalid_arch, why); };
    if (a.feature_dim < 2) fail("feature_dim M must be >= 2");
    if (a.num_classes < 2) fail("num_classes must be >= 2");
    if (a.input_shape.empty() || a.input_dim() == 0) fail("input_shape must be non-empty");
    if (a.activation != "tanh") fail("only the tanh activation is supported");
    if (a.kind == ArchKind::mlp) {
        if (a.hidden_widths.empty()) fail("mlp needs at least one hidden width");
        for (int w : a.hidden_widths)
            if (w < 1) fail("hidden widths must be positive");
        if (a.hidden_widths.back() != a.feature_dim) fail("last hidden width must equal feature_dim");
    } else {
        if (a.input_shape.size() != 3) fail("convnet input_shape must be [channels, height, width]");
        if (a.blocks < 1 || a.channels < 1) fail("convnet needs blocks >= 1 and channels >= 1");
        std::size_t f = std::size_t{1} << a.blocks;
        if (a.input_shape[1] % f != 0 || a.input_shape[2] % f != 0)
            fail("image height and width must be divisible by 2^blocks");
    }
}

inline nlohmann::json to_json(const ArchSpec& a) {
    nlohmann::json j;
    j["kind"] = a.kind == ArchKind::mlp ? "mlp" : "convnet";
    j["input_shape"] = a.input_shape;
    if (a.kind == ArchKind::mlp) {
        j["hidden_widths"] = a.hidden_widths;
    } else {
        j["blocks"] = a.blocks;
        j["channels"] = a.channels;
    }
    j["feature_dim"] = a.feature_dim;
    j["num_classes"] = a.num_classes;
    j["activation"] = a.activation;
    return j;
}

/// input_shape and num_classes may be omitted and filled in later from data.
inline ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec a;
    try {
        std::string kind = j.at("kind").get<std::string>();
        if (kind == "mlp")
            a.kind = ArchKind::mlp;
        else if (kind == "convnet")
            a.kind = ArchKind::convnet;
        else
            throw Error(ErrorKind::invalid_arch, "unknown arch kind " + kind);
        a.input_shape = j.value("input_shape", std::vector<std::size_t>{});
        a.hidden_widths = j.value("hidden_widths", std::vector<int>{});
        a.blocks = j.value("blocks", 2);
        a.channels = j.value("channels", 8);
        a.num_classes = j.value("num_classes", 0);
        a.activation = j.value("activation", std::string("tanh"));
        a.feature_dim = j.contains("feature_dim") ? j.at("feature_dim").get<int>()
                                                  : (a.hidden_widths.empty() ? 0 : a.hidden_widths.back());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::invalid_arch, std::string("malformed arch: ") + e.what());
    }
    return a;
}

inline ArchSpec resolve_for(ArchSpec a, std::span<const std::size_t> shape, int num_classes) {
    if (a.input_shape.empty()) a.input_shape.assign(shape.begin(), shape.end());
    if (a.num_classes == 0) a.num_classes = num_classes;
    return a;
}

struct Param {
    std::string name;
    Matrix value;
};

struct TrainMeta {
    bool pretrained = false;
    int epochs = 0;
    std::uint64_t seed = 0;
    double train_accuracy = 0.0;
};

/// A network f = l(h(x)); the last two params (head.weight, head.bias) form l.
struct TrainedProxy {
    ArchSpec arch;
    std::vector<Param> params;
    TrainMeta meta;
    std::string id;

    std::vector<ad::Var> param_vars(bool requires_grad = false) const {
        std::vector<ad::Var> out;
        out.reserve(params.size());
        for (const auto& p : params) out.push_back(requires_grad ? ad::Var::leaf(p.value) : ad::Var::constant(p.value));
        return out;
    }
};

namespace detail {

struct ConvIndex {
    std::shared_ptr<const std::vector<long>> im2col, reorder;
    std::array<std::shared_ptr<const std::vector<long>>, 4> pool;
};

// Index maps for a 3x3 same-padding convolution and a 2x2 average pool on an
// [n x (ch*h*w)] channel-major batch.
inline ConvIndex conv_index(std::size_t n, std::size_t ch, std::size_t h, std::size_t w, std::size_t out_ch) {
    ConvIndex ix;
    const std::size_t hw = h * w;
    auto cols = std::make_shared<std::vector<long>>(n * hw * ch * 9, -1);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < h; ++oy)
            for (std::size_t ox = 0; ox < w; ++ox) {
                std::size_t row = b * hw + oy * w + ox;
                for (std::size_t c = 0; c < ch; ++c)
                    for (std::size_t ky = 0; ky < 3; ++ky)
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            long iy = static_cast<long>(oy + ky) - 1, ixx = static_cast<long>(ox + kx) - 1;
                            if (iy < 0 || ixx < 0 || iy >= static_cast<long>(h) || ixx >= static_cast<long>(w)) continue;
                            (*cols)[row * ch * 9 + c * 9 + ky * 3 + kx] =
                                static_cast<long>(b * ch * hw + c * hw + static_cast<std::size_t>(iy) * w +
                                                  static_cast<std::size_t>(ixx));
                        }
            }
    auto reorder = std::make_shared<std::vector<long>>(n * out_ch * hw);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < out_ch; ++o)
            for (std::size_t p = 0; p < hw; ++p)
                (*reorder)[b * out_ch * hw + o * hw + p] = static_cast<long>((b * hw + p) * out_ch + o);
    const std::size_t ph = h / 2, pw = w / 2;
    for (std::size_t d = 0; d < 4; ++d) {
        auto idx = std::make_shared<std::vector<long>>(n * out_ch * ph * pw);
        std::size_t dy = d / 2, dx = d % 2;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t o = 0; o < out_ch; ++o)
                for (std::size_t y = 0; y < ph; ++y)
                    for (std::size_t x = 0; x < pw; ++x)
                        (*idx)[b * out_ch * ph * pw + o * ph * pw + y * pw + x] =
                            static_cast<long>(b * out_ch * hw + o * hw + (2 * y + dy) * w + 2 * x + dx);
        ix.pool[d] = std::move(idx);
    }
    ix.im2col = std::move(cols);
    ix.reorder = std::move(reorder);
    return ix;
}

inline ad::Var affine(const ad::Var& x, const ad::Var& w, const ad::Var& b) { return ad::add(ad::matmul(x, w), b); }

}  // namespace detail

/// h(x): [n x input_dim] -> [n x M].
inline ad::Var forward_features(const ArchSpec& a, std::span<const ad::Var> params, const ad::Var& x) {
    if (x.cols() != a.input_dim())
        throw Error(ErrorKind::shape_mismatch, "input has " + std::to_string(x.cols()) + " features, arch expects " +
                                                   std::to_string(a.input_dim()));
    ad::Var h = x;
    std::size_t p = 0;
    if (a.kind == ArchKind::mlp) {
        for (std::size_t l = 0; l < a.hidden_widths.size(); ++l, p += 2) h = ad::tanh(detail::affine(h, params[p], params[p + 1]));
        return h;
    }
    const std::size_t n = x.rows();
    std::size_t ch = a.input_shape[0], hh = a.input_shape[1], ww = a.input_shape[2];
    const auto out_ch = static_cast<std::size_t>(a.channels);
    for (int blk = 0; blk < a.blocks; ++blk, p += 2) {
        auto ix = detail::conv_index(n, ch, hh, ww, out_ch);
        ad::Var cols = ad::gather(h, ix.im2col, n * hh * ww, ch * 9);
        ad::Var y = detail::affine(cols, params[p], params[p + 1]);
        y = ad::tanh(ad::gather(y, ix.reorder, n, out_ch * hh * ww));
        ad::Var pooled = ad::gather(y, ix.pool[0], n, out_ch * (hh / 2) * (ww / 2));
        for (std::size_t d = 1; d < 4; ++d) pooled = ad::add(pooled, ad::gather(y, ix.pool[d], n, pooled.cols()));
        h = ad::scale(pooled, 0.25);
        ch = out_ch;
        hh /= 2;
        ww /= 2;
    }
    return ad::tanh(detail::affine(h, params[p], params[p + 1]));
}

/// l(z): [n x M] -> [n x C].
inline ad::Var forward_head(std::span<const ad::Var> params, const ad::Var& features) {
    const std::size_t k = params.size();
    return detail::affine(features, params[k - 2], params[k - 1]);
}

inline ad::Var forward_logits(const ArchSpec& a, std::span<const ad::Var> params, const ad::Var& x) {
    return forward_head(params, forward_features(a, params, x));
}

/// Deterministic Xavier-uniform weights, zero biases.
inline TrainedProxy build_model(ArchSpec arch, std::uint64_t seed) {
    validate(arch);
    Rng rng = make_rng({seed, 0x6d6f64656cULL});
    TrainedProxy m;
    m.arch = arch;
    m.meta.seed = seed;
    m.id = arch_name(arch) + "-s" + std::to_string(seed);
    auto add_layer = [&](const std::string& name, std::size_t in, std::size_t out, double fan_in, double fan_out) {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Matrix w(in, out);
        for (auto& v : w.data) v = dist(rng);
        m.params.push_back({name + ".weight", std::move(w)});
        m.params.push_back({name + ".bias", Matrix(1, out)});
    };
    if (arch.kind == ArchKind::mlp) {
        std::size_t in = arch.input_dim();
        for (std::size_t l = 0; l < arch.hidden_widths.size(); ++l) {
            auto out = static_cast<std::size_t>(arch.hidden_widths[l]);
            add_layer("fc" + std::to_string(l), in, out, static_cast<double>(in), static_cast<double>(out));
            in = out;
        }
    } else {
        std::size_t ch = arch.input_shape[0];
        const auto out = static_cast<std::size_t>(arch.channels);
        for (int b = 0; b < arch.blocks; ++b) {
            add_layer("conv" + std::to_string(b), ch * 9, out, static_cast<double>(ch * 9), static_cast<double>(out * 9));
            ch = out;
        }
        std::size_t flat = out * (arch.input_shape[1] >> arch.blocks) * (arch.input_shape[2] >> arch.blocks);
        auto m_dim = static_cast<std::size_t>(arch.feature_dim);
        add_layer("proj", flat, m_dim, static_cast<double>(flat), static_cast<double>(m_dim));
    }
    auto feat = static_cast<std::size_t>(arch.feature_dim);
    auto classes = static_cast<std::size_t>(arch.num_classes);
    add_layer("head", feat, classes, static_cast<double>(feat), static_cast<double>(classes));
    return m;
}

inline Matrix extract_features(const TrainedProxy& proxy, const Matrix& batch) {
    if (batch.rows == 0) return Matrix(0, static_cast<std::size_t>(proxy.arch.feature_dim));
    ad::NoGradGuard guard;
    auto params = proxy.param_vars();
    return forward_features(proxy.arch, params, ad::Var::constant(batch)).value();
}

inline Matrix classify(const TrainedProxy& proxy, const Matrix& batch) {
    if (batch.rows == 0) return Matrix(0, static_cast<std::size_t>(proxy.arch.num_classes));
    ad::NoGradGuard guard;
    auto params = proxy.param_vars();
    return forward_logits(proxy.arch, params, ad::Var::constant(batch)).value();
}

/// Index of the largest logit; ties go to the lowest class id.
inline int argmax_row(std::span<const double> logits) {
    int best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
        if (logits[j] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    return best;
}

inline double accuracy_on(const TrainedProxy& net, const Matrix& samples, std::span<const int> labels) {
    if (labels.empty()) throw Error(ErrorKind::invalid_argument, "accuracy of an empty set is undefined");
    Matrix logits = classify(net, samples);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_row(logits.row(i)) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

struct TrainOptions {
    int epochs = 30;
    double lr = 0.05;
    std::size_t batch_size = 64;
    double momentum = 0.9;
    /// Batch loss above this (or non-finite) aborts with training-diverged.
    double divergence_threshold = 1e3;
};

/// Mini-batch SGD with momentum on mean cross-entropy. Returns the final
/// accuracy on the training set.
inline double train_classifier(TrainedProxy& net, const Matrix& samples, std::span<const int> labels,
                               const TrainOptions& opt, std::uint64_t seed) {
    if (samples.cols != net.arch.input_dim()) throw Error(ErrorKind::shape_mismatch, "training data width");
    const std::size_t n = samples.rows;
    if (opt.epochs <= 0 || n == 0) return n == 0 ? 0.0 : accuracy_on(net, samples, labels);
    const std::size_t bs = std::max<std::size_t>(1, std::min(opt.batch_size, n));
    std::vector<Matrix> velocity;
    for (const auto& p : net.params) velocity.emplace_back(p.value.rows, p.value.cols);

    Rng rng = make_rng({seed, 0x747261696eULL});
    std::vector<std::size_t> order(n);
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += bs) {
            std::size_t stop = std::min(n, start + bs);
            Matrix xb(stop - start, samples.cols);
            std::vector<int> yb;
            for (std::size_t i = start; i < stop; ++i) {
                auto src = samples.row(order[i]);
                std::copy(src.begin(), src.end(), xb.row(i - start).begin());
                yb.push_back(labels[order[i]]);
            }
            auto params = net.param_vars(true);
            ad::Var loss = ad::cross_entropy(forward_logits(net.arch, params, ad::Var::constant(std::move(xb))), yb);
            double lv = loss.item();
            if (!std::isfinite(lv) || lv > opt.divergence_threshold)
                throw Error(ErrorKind::training_diverged, "loss " + std::to_string(lv) + " at epoch " + std::to_string(epoch));
            auto grads = ad::grad(loss, params);
            for (std::size_t k = 0; k < net.params.size(); ++k) {
                auto& v = velocity[k].data;
                auto& w = net.params[k].value.data;
                const auto& g = grads[k].value().data;
                for (std::size_t e = 0; e < w.size(); ++e) {
                    v[e] = opt.momentum * v[e] + g[e];
                    w[e] -= opt.lr * v[e];
                }
            }
        }
    }
    for (const auto& p : net.params)
        for (double v : p.value.data)
            if (!std::isfinite(v)) throw Error(ErrorKind::training_diverged, "non-finite parameters after training");
    return accuracy_on(net, samples, labels);
}

/// epochs == 0 returns the model untouched with pretrained = false.
inline TrainedProxy pretrain(TrainedProxy model, const LabeledDataset& real, TrainOptions opt, std::uint64_t seed) {
    if (opt.epochs < 0) throw Error(ErrorKind::invalid_argument, "epochs must be >= 0");
    if (opt.epochs == 0) return model;
    model.meta.train_accuracy = train_classifier(model, real.samples, real.labels, opt, seed);
    model.meta.pretrained = true;
    model.meta.epochs = opt.epochs;
    return model;
}

// ---- pool -----------------------------------------------------------------

struct ModelPool {
    std::vector<TrainedProxy> proxies;
    std::uint64_t sampling_seed = 0;
};

/// Uniform draw keyed by (sampling_seed, iteration).
inline std::size_t sample_index(const ModelPool& pool, std::uint64_t iteration) {
    if (pool.proxies.empty()) throw Error(ErrorKind::empty_pool, "cannot sample from an empty pool");
    Rng rng = make_rng({pool.sampling_seed, iteration});
    std::uniform_int_distribution<std::size_t> pick(0, pool.proxies.size() - 1);
    return pick(rng);
}

inline const TrainedProxy& sample_proxy(const ModelPool& pool, std::uint64_t iteration) {
    return pool.proxies[sample_index(pool, iteration)];
}

struct PoolSpec {
    ArchSpec arch;
    int size = 5;
    TrainOptions train{};
    std::uint64_t seed = 100;
    std::uint64_t sampling_seed = 1;
};

/// `size` proxies with seeds seed, seed+1, ..., plus one monitor proxy
/// (seed + size) that is not part of the sampling pool.
struct BuiltPool {
    ModelPool pool;
    TrainedProxy monitor;
};

inline BuiltPool build_pool(const PoolSpec& spec, const LabeledDataset& real) {
    if (spec.size < 1) throw Error(ErrorKind::empty_pool, "pool size must be >= 1");
    ArchSpec arch = resolve_for(spec.arch, real.shape, real.num_classes);
    std::vector<TrainedProxy> built(static_cast<std::size_t>(spec.size) + 1);
    parallel_for(built.size(), [&](std::size_t i) {
        std::uint64_t s = spec.seed + i;
        built[i] = pretrain(build_model(arch, s), real, spec.train, s);
    });
    BuiltPool out;
    out.monitor = std::move(built.back());
    built.pop_back();
    out.pool.proxies = std::move(built);
    out.pool.sampling_seed = spec.sampling_seed;
    return out;
}

/// Untrained networks for gradient matching, one per seed.
inline ModelPool build_random_pool(const ArchSpec& arch, int size, std::uint64_t seed, std::uint64_t sampling_seed) {
    if (size < 1) throw Error(ErrorKind::empty_pool, "pool size must be >= 1");
    ModelPool pool;
    pool.sampling_seed = sampling_seed;
    for (int i = 0; i < size; ++i) pool.proxies.push_back(build_model(arch, seed + static_cast<std::uint64_t>(i)));
    return pool;
}

// ---- checkpoints ----------------------------------------------------------

inline void save_proxy(const TrainedProxy& p, const std::filesystem::path& dir) {
    detail::ensure_directory(dir);
    nlohmann::json index;
    index["id"] = p.id;
    index["train_meta"] = {{"pretrained", p.meta.pretrained},
                           {"epochs", p.meta.epochs},
                           {"seed", p.meta.seed},
                           {"train_accuracy", p.meta.train_accuracy}};
    std::vector<double> flat;
    std::size_t offset = 0;
    for (const auto& t : p.params) {
        index["tensors"].push_back(
            {{"name", t.name}, {"shape", {t.value.rows, t.value.cols}}, {"offset", offset}, {"dtype", "f32"}});
        flat.insert(flat.end(), t.value.data.begin(), t.value.data.end());
        offset += t.value.size();
    }
    auto bytes = detail::encode_floats(flat, "f32");
    detail::write_bytes(dir / "params.bin", bytes.data(), bytes.size());
    detail::write_json_file(dir / "params.json", index);
    detail::write_json_file(dir / "arch.json", to_json(p.arch));
}

inline TrainedProxy load_proxy(const std::filesystem::path& dir) {
    TrainedProxy p;
    p.arch = arch_from_json(detail::read_json_file(dir / "arch.json"));
    validate(p.arch);
    auto index = detail::read_json_file(dir / "params.json");
    auto values = detail::decode_floats(detail::read_bytes(dir / "params.bin"), "f32");
    TrainedProxy reference = build_model(p.arch, 0);
    try {
        p.id = index.value("id", dir.filename().string());
        const auto& meta = index.at("train_meta");
        p.meta.pretrained = meta.at("pretrained").get<bool>();
        p.meta.epochs = meta.at("epochs").get<int>();
        p.meta.seed = meta.at("seed").get<std::uint64_t>();
        p.meta.train_accuracy = meta.at("train_accuracy").get<double>();
        const auto& tensors = index.at("tensors");
        if (tensors.size() != reference.params.size())
            throw Error(ErrorKind::manifest_mismatch, "tensor count does not match arch");
        for (std::size_t k = 0; k < tensors.size(); ++k) {
            auto shape = tensors[k].at("shape").get<std::vector<std::size_t>>();
            auto offset = tensors[k].at("offset").get<std::size_t>();
            const auto& ref = reference.params[k];
            if (shape.size() != 2 || shape[0] != ref.value.rows || shape[1] != ref.value.cols)
                throw Error(ErrorKind::manifest_mismatch, "tensor " + ref.name + " shape does not match arch");
            if (offset + ref.value.size() > values.size())
                throw Error(ErrorKind::size_mismatch, "params.bin too short for " + ref.name);
            Matrix m(shape[0], shape[1],
                     std::vector<double>(values.begin() + static_cast<long>(offset),
                                         values.begin() + static_cast<long>(offset + ref.value.size())));
            p.params.push_back({tensors[k].at("name").get<std::string>(), std::move(m)});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::manifest_mismatch, std::string("malformed params.json: ") + e.what());
    }
    return p;
}

inline void save_pool(const BuiltPool& built, const std::filesystem::path& dir) {
    nlohmann::json j;
    j["sampling_seed"] = built.pool.sampling_seed;
    for (std::size_t i = 0; i < built.pool.proxies.size(); ++i) {
        std::string name = "proxy_" + std::to_string(i);
        save_proxy(built.pool.proxies[i], dir / name);
        j["proxies"].push_back(name);
    }
    save_proxy(built.monitor, dir / "monitor");
    j["monitor"] = "monitor";
    detail::write_json_file(dir / "pool.json", j);
}

inline BuiltPool load_pool(const std::filesystem::path& dir) {
    auto j = detail::read_json_file(dir / "pool.json");
    BuiltPool out;
    try {
        out.pool.sampling_seed = j.at("sampling_seed").get<std::uint64_t>();
        for (const auto& name : j.at("proxies")) out.pool.proxies.push_back(load_proxy(dir / name.get<std::string>()));
        out.monitor = load_proxy(dir / j.at("monitor").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::manifest_mismatch, std::string("malformed pool.json: ") + e.what());
    }
    if (out.pool.proxies.empty()) throw Error(ErrorKind::empty_pool, "pool.json lists no proxies");
    return out;
}

}  // namespace cmidd
