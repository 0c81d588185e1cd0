#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmidd/autodiff.hpp"
#include "cmidd/cmi.hpp"
#include "cmidd/datasets.hpp"
#include "cmidd/error.hpp"
#include "cmidd/models.hpp"
#include "cmidd/rng.hpp"

namespace cmidd {

enum class Objective { dm, grad_match };

inline const char* to_string(Objective o) { return o == Objective::dm ? "dm" : "grad-match"; }

inline Objective objective_from_string(const std::string& s) {
    if (s == "dm") return Objective::dm;
    if (s == "grad-match" || s == "grad_match") return Objective::grad_match;
    throw Error(ErrorKind::invalid_argument, "unknown objective " + s);
}

/// Selects whether the CMI regularizer exists in the compiled loss at all.
enum class CmiPath { enabled, disabled };

struct BackboneSpec {
    ArchSpec arch;
    int size = 5;
    std::uint64_t seed = 200;
};

struct DistillSeeds {
    std::uint64_t init = 0;
    std::uint64_t pool = 1;
    std::uint64_t loop = 2;
};

struct DistillConfig {
    Objective objective = Objective::dm;
    double lambda = 0.0;
    int iterations = 500;
    double lr_synthetic = 1.0;
    double momentum = 0.0;
    CmiSpace cmi_space = CmiSpace::feature;
    int cmi_every = 1;
    bool detach_centroid = false;
    int ipc = 10;
    InitMode init = InitMode::real_sample;
    std::size_t batch_real = 64;
    PoolSpec pool_spec{};
    BackboneSpec backbone_spec{};
    DistillSeeds seeds{};
    /// Monitored-CMI cadence; 0 means max(1, iterations / 50).
    int monitor_every = 0;
};

inline void validate(const DistillConfig& cfg) {
    if (!(cfg.lambda >= 0.0)) throw Error(ErrorKind::invalid_argument, "lambda must be >= 0");
    if (cfg.iterations < 1) throw Error(ErrorKind::invalid_argument, "iterations must be >= 1");
    if (cfg.cmi_every < 1) throw Error(ErrorKind::invalid_argument, "cmi_every must be >= 1");
    if (cfg.ipc < 1) throw Error(ErrorKind::invalid_argument, "ipc must be >= 1");
    if (cfg.batch_real < 1) throw Error(ErrorKind::invalid_argument, "batch_real must be >= 1");
    if (cfg.monitor_every < 0) throw Error(ErrorKind::invalid_argument, "monitor_every must be >= 0");
}

struct LossBreakdown {
    double l_dd = 0.0;
    double cmi = 0.0;
    double total = 0.0;
    int iteration = 0;
    bool lambda_active = false;
    int zero_gradient_groups = 0;
};

struct MonitorPoint {
    int iteration = 0;
    double monitor_cmi = 0.0;
};

struct DistillTrace {
    std::vector<LossBreakdown> steps;
    std::vector<double> wall_ms;
    std::vector<MonitorPoint> monitor;

    double initial_monitor_cmi() const { return monitor.empty() ? 0.0 : monitor.front().monitor_cmi; }
    double final_monitor_cmi() const { return monitor.empty() ? 0.0 : monitor.back().monitor_cmi; }
    double mean_wall_ms() const {
        if (wall_ms.empty()) return 0.0;
        double s = 0.0;
        for (double w : wall_ms) s += w;
        return s / static_cast<double>(wall_ms.size());
    }
};

/// Raised when the loss or its gradient stops being finite; keeps the
/// iterations completed so far.
class DistillError : public Error {
public:
    DistillError(const std::string& what, DistillTrace partial)
        : Error(ErrorKind::non_finite_loss, what), trace(std::move(partial)) {}
    DistillTrace trace;
};

// ---- real batches ---------------------------------------------------------

struct RealBatch {
    Matrix samples;
    std::vector<int> labels;
};

/// Up to `per_class` samples of every class, drawn from (seed, iteration).
inline RealBatch sample_real_batch(const LabeledDataset& real, std::size_t per_class, std::uint64_t seed,
                                   std::uint64_t iteration) {
    std::vector<std::size_t> picked;
    for (const auto& [label, idx] : partition_by_class(real)) {
        Rng rng = make_rng({seed, iteration, static_cast<std::uint64_t>(label)});
        for (auto p : sample_without_replacement(idx.size(), per_class, rng)) picked.push_back(idx[p]);
    }
    LabeledDataset sub = subset(real, picked);
    return {std::move(sub.samples), std::move(sub.labels)};
}

namespace detail {

inline std::vector<std::size_t> members_of(std::span<const int> labels, int y) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == y) out.push_back(i);
    return out;
}

inline Matrix rows_of(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = m.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace detail

// ---- distribution matching ------------------------------------------------

/// sum_y || mean_real_y h(x) - mean_syn_y h(s) ||^2 under the proxy extractor.
inline ad::Var dm_loss(const ad::Var& syn, std::span<const int> syn_labels, const RealBatch& batch,
                       const TrainedProxy& proxy) {
    auto params = proxy.param_vars();
    ad::Var syn_features = forward_features(proxy.arch, params, syn);
    Matrix real_features;
    {
        ad::NoGradGuard guard;
        real_features = forward_features(proxy.arch, params, ad::Var::constant(batch.samples)).value();
    }
    ad::Var loss;
    for (const auto& [y, idx] : partition_by_class(syn_labels)) {
        auto real_idx = detail::members_of(batch.labels, y);
        if (real_idx.empty())
            throw Error(ErrorKind::class_missing_in_batch, "real batch has no samples of class " + std::to_string(y));
        Matrix real_mean(1, real_features.cols);
        for (auto r : real_idx)
            for (std::size_t j = 0; j < real_features.cols; ++j) real_mean(0, j) += real_features(r, j);
        for (auto& v : real_mean.data) v /= static_cast<double>(real_idx.size());
        ad::Var syn_mean = ad::scale(ad::sum_rows(ad::select_rows(syn_features, idx)), 1.0 / static_cast<double>(idx.size()));
        ad::Var diff = ad::sub(ad::Var::constant(std::move(real_mean)), syn_mean);
        ad::Var term = ad::sum_all(ad::mul(diff, diff));
        loss = loss.defined() ? ad::add(loss, term) : term;
    }
    return loss;
}

inline double dm_loss(const SyntheticDataset& s, const RealBatch& batch, const TrainedProxy& proxy) {
    ad::NoGradGuard guard;
    return dm_loss(ad::Var::constant(s.samples), s.labels(), batch, proxy).item();
}

// ---- gradient matching ----------------------------------------------------

/// Sum over groups of (1 - cos(real_g, syn_g)). Column g of every part
/// belongs to group g; groups whose norm product is zero contribute 0 and
/// are counted in `zero_groups`.
inline ad::Var grouped_cosine_distance(std::span<const ad::Var> real_parts, std::span<const ad::Var> syn_parts,
                                       int* zero_groups = nullptr) {
    if (real_parts.size() != syn_parts.size() || real_parts.empty())
        throw Error(ErrorKind::shape_mismatch, "gradient parts must pair up");
    ad::Var dot, real_sq, syn_sq;
    auto acc = [](ad::Var& into, const ad::Var& v) { into = into.defined() ? ad::add(into, v) : v; };
    for (std::size_t p = 0; p < real_parts.size(); ++p) {
        acc(dot, ad::sum_rows(ad::mul(real_parts[p], syn_parts[p])));
        acc(real_sq, ad::sum_rows(ad::mul(real_parts[p], real_parts[p])));
        acc(syn_sq, ad::sum_rows(ad::mul(syn_parts[p], syn_parts[p])));
    }
    ad::Var norm_product_sq = ad::mul(real_sq, syn_sq);
    const Matrix& nps = norm_product_sq.value();
    Matrix mask(1, nps.cols, 1.0);
    int zeros = 0;
    for (std::size_t g = 0; g < nps.cols; ++g)
        if (!(nps(0, g) > 0.0)) {
            mask(0, g) = 0.0;
            ++zeros;
        }
    if (zero_groups) *zero_groups += zeros;
    constexpr double kTiny = 1e-300;
    ad::Var cosine = ad::div(dot, ad::sqrt(ad::clamp_min(norm_product_sq, kTiny)));
    ad::Var per_group = ad::mul(ad::sub(ad::Var::scalar(1.0), cosine), ad::Var::constant(std::move(mask)));
    return ad::sum_all(per_group);
}

struct GradMatchResult {
    ad::Var loss;
    int zero_gradient_groups = 0;
};

/// Per class, compares the cross-entropy parameter gradients that real and
/// synthetic samples induce in `backbone`, layer by layer, grouping each
/// output neuron's incoming weights with its bias.
inline GradMatchResult grad_match_loss(const ad::Var& syn, std::span<const int> syn_labels, const RealBatch& batch,
                                       const TrainedProxy& backbone) {
    auto params = backbone.param_vars(true);
    GradMatchResult out;
    for (const auto& [y, idx] : partition_by_class(syn_labels)) {
        auto real_idx = detail::members_of(batch.labels, y);
        if (real_idx.empty())
            throw Error(ErrorKind::class_missing_in_batch, "real batch has no samples of class " + std::to_string(y));

        std::vector<int> real_y(real_idx.size(), y), syn_y(idx.size(), y);
        ad::Var real_ce = ad::cross_entropy(
            forward_logits(backbone.arch, params, ad::Var::constant(detail::rows_of(batch.samples, real_idx))), real_y);
        std::vector<ad::Var> real_grads = ad::grad(real_ce, params, false);

        ad::Var syn_ce = ad::cross_entropy(forward_logits(backbone.arch, params, ad::select_rows(syn, idx)), syn_y);
        std::vector<ad::Var> syn_grads = ad::grad(syn_ce, params, true);

        for (std::size_t k = 0; k + 1 < params.size(); k += 2) {
            ad::Var r[] = {real_grads[k], real_grads[k + 1]};
            ad::Var s[] = {syn_grads[k], syn_grads[k + 1]};
            ad::Var d = grouped_cosine_distance(r, s, &out.zero_gradient_groups);
            out.loss = out.loss.defined() ? ad::add(out.loss, d) : d;
        }
    }
    return out;
}

inline double grad_match_loss(const SyntheticDataset& s, const RealBatch& batch, const TrainedProxy& backbone) {
    return grad_match_loss(ad::Var::constant(s.samples), s.labels(), batch, backbone).loss.item();
}

// ---- CMI-enhanced loss ------------------------------------------------------

struct LossWithGradient {
    LossBreakdown breakdown;
    Matrix gradient;  // d total / d samples
};

/// L = L_DD + lambda * CMI, where the CMI term exists only on iterations
/// with iteration % cmi_every == 0. `matcher` is the network the base
/// objective uses: the proxy itself for DM, a backbone for gradient matching.
template <CmiPath Path = CmiPath::enabled>
LossWithGradient cmi_enhanced_loss_with_grad(const Matrix& samples, std::span<const int> labels,
                                             const RealBatch& batch, const TrainedProxy& proxy,
                                             const TrainedProxy& matcher, const DistillConfig& cfg, int iteration) {
    ad::Var syn = ad::Var::leaf(samples);
    LossBreakdown bd;
    bd.iteration = iteration;

    ad::Var l_dd;
    if (cfg.objective == Objective::dm) {
        l_dd = dm_loss(syn, labels, batch, matcher);
    } else {
        auto gm = grad_match_loss(syn, labels, batch, matcher);
        l_dd = gm.loss;
        bd.zero_gradient_groups = gm.zero_gradient_groups;
    }
    bd.l_dd = l_dd.item();
    ad::Var total = l_dd;

    if constexpr (Path == CmiPath::enabled) {
        if (iteration % cfg.cmi_every == 0) {
            auto params = proxy.param_vars();
            CmiTerms terms = cmi_terms(cmi_outputs(proxy, params, syn, cfg.cmi_space), labels, cfg.detach_centroid);
            bd.cmi = terms.total.item();
            bd.lambda_active = true;
            total = ad::add(l_dd, ad::scale(terms.total, cfg.lambda));
        }
    }
    bd.total = total.item();
    return {bd, ad::grad(total, syn).value()};
}

template <CmiPath Path = CmiPath::enabled>
LossBreakdown cmi_enhanced_loss(const SyntheticDataset& s, const RealBatch& batch, const TrainedProxy& proxy,
                                const DistillConfig& cfg, int iteration, const TrainedProxy* backbone = nullptr) {
    const TrainedProxy& matcher = backbone ? *backbone : proxy;
    return cmi_enhanced_loss_with_grad<Path>(s.samples, s.labels(), batch, proxy, matcher, cfg, iteration).breakdown;
}

// ---- optimization loop -----------------------------------------------------

/// Everything that carries across iterations.
struct DistillState {
    SyntheticDataset synthetic;
    Matrix velocity;
};

struct DistillPools {
    ModelPool proxies;
    TrainedProxy monitor;
    ModelPool backbones;  // grad-match only
};

inline DistillPools make_pools(const LabeledDataset& real, const DistillConfig& cfg,
                               const std::optional<BuiltPool>& prebuilt = std::nullopt) {
    DistillPools pools;
    BuiltPool built = prebuilt ? *prebuilt : build_pool(cfg.pool_spec, real);
    pools.proxies = std::move(built.pool);
    pools.proxies.sampling_seed = cfg.seeds.pool;
    pools.monitor = std::move(built.monitor);
    if (cfg.objective == Objective::grad_match) {
        ArchSpec arch = resolve_for(cfg.backbone_spec.arch, real.shape, real.num_classes);
        pools.backbones = build_random_pool(arch, cfg.backbone_spec.size, cfg.backbone_spec.seed,
                                            cfg.seeds.pool ^ 0x9e3779b97f4a7c15ULL);
    }
    return pools;
}

/// One SGD update of the synthetic samples; labels and proxies are untouched.
template <CmiPath Path = CmiPath::enabled>
LossBreakdown distill_step(DistillState& state, const DistillConfig& cfg, const DistillPools& pools,
                           const LabeledDataset& real, int iteration) {
    const auto it = static_cast<std::uint64_t>(iteration);
    const TrainedProxy& proxy = sample_proxy(pools.proxies, it);
    const TrainedProxy& matcher = cfg.objective == Objective::dm ? proxy : sample_proxy(pools.backbones, it);
    RealBatch batch = sample_real_batch(real, cfg.batch_real, cfg.seeds.loop, it);

    auto [bd, grad] = cmi_enhanced_loss_with_grad<Path>(state.synthetic.samples, state.synthetic.labels(), batch,
                                                        proxy, matcher, cfg, iteration);
    bool finite = std::isfinite(bd.total);
    for (double g : grad.data) finite = finite && std::isfinite(g);
    if (!finite) throw Error(ErrorKind::non_finite_loss, "loss " + std::to_string(bd.total) + " at iteration " +
                                                             std::to_string(iteration));

    if (state.velocity.size() != grad.size()) state.velocity = Matrix(grad.rows, grad.cols);
    auto& s = state.synthetic.samples.data;
    auto& v = state.velocity.data;
    for (std::size_t e = 0; e < s.size(); ++e) {
        v[e] = cfg.momentum * v[e] + grad.data[e];
        s[e] -= cfg.lr_synthetic * v[e];
        finite = finite && std::isfinite(s[e]);
    }
    if (!finite) throw Error(ErrorKind::non_finite_loss, "update overflowed at iteration " + std::to_string(iteration));
    return bd;
}

struct DistillResult {
    SyntheticDataset synthetic;
    DistillTrace trace;
};

template <CmiPath Path = CmiPath::enabled>
DistillResult run_distillation(const LabeledDataset& real, const DistillConfig& cfg, const DistillPools& pools) {
    validate(cfg);
    validate(real);
    DistillState state{init_synthetic(real, cfg.ipc, cfg.init, cfg.seeds.init), {}};
    DistillTrace trace;
    const int cadence = cfg.monitor_every > 0 ? cfg.monitor_every : std::max(1, cfg.iterations / 50);
    auto monitor = [&](int iteration) {
        trace.monitor.push_back({iteration, empirical_cmi(state.synthetic, pools.monitor, cfg.cmi_space).total});
    };

    for (int i = 0; i < cfg.iterations; ++i) {
        if (i % cadence == 0) monitor(i);
        auto start = std::chrono::steady_clock::now();
        LossBreakdown bd;
        try {
            bd = distill_step<Path>(state, cfg, pools, real, i);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::non_finite_loss) throw DistillError(e.what(), std::move(trace));
            throw;
        }
        auto stop = std::chrono::steady_clock::now();
        trace.steps.push_back(bd);
        trace.wall_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    monitor(cfg.iterations);
    return {std::move(state.synthetic), std::move(trace)};
}

template <CmiPath Path = CmiPath::enabled>
DistillResult run_distillation(const LabeledDataset& real, const DistillConfig& cfg) {
    return run_distillation<Path>(real, cfg, make_pools(real, cfg));
}

// ---- trace output -----------------------------------------------------------

/// Newline-delimited JSON: one record per iteration plus the monitor points.
inline void write_trace(const DistillTrace& trace, std::ostream& out) {
    std::size_t m = 0;
    auto flush_monitor = [&](int upto) {
        while (m < trace.monitor.size() && trace.monitor[m].iteration <= upto) {
            nlohmann::json j{{"iteration", trace.monitor[m].iteration}, {"monitor_cmi", trace.monitor[m].monitor_cmi}};
            out << j.dump() << '\n';
            ++m;
        }
    };
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        const auto& s = trace.steps[i];
        flush_monitor(s.iteration);
        nlohmann::json j{{"iteration", s.iteration},     {"l_dd", s.l_dd},
                         {"cmi", s.cmi},                 {"total", s.total},
                         {"lambda_active", s.lambda_active}, {"wall_ms", i < trace.wall_ms.size() ? trace.wall_ms[i] : 0.0}};
        if (s.zero_gradient_groups > 0) j["zero_gradient_groups"] = s.zero_gradient_groups;
        out << j.dump() << '\n';
    }
    flush_monitor(std::numeric_limits<int>::max());
}

inline void write_trace(const DistillTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    write_trace(trace, out);
}

}  // namespace cmidd
