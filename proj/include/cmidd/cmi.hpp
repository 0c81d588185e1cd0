#pragma once

// Class-aware conditional mutual information of a labeled batch under a
// frozen network: each sample is mapped to the simplex by a softmax over its
// feature (or logit) vector, and the CMI is the sample-averaged KL divergence
// to its class centroid.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmidd/autodiff.hpp"
#include "cmidd/datasets.hpp"
#include "cmidd/error.hpp"
#include "cmidd/models.hpp"

namespace cmidd {

/// Floor applied inside logarithms; softmax outputs only reach it on underflow.
inline constexpr double kLogFloor = 1e-12;

enum class CmiSpace { feature, probability };

inline const char* to_string(CmiSpace s) { return s == CmiSpace::feature ? "feature" : "probability"; }

inline CmiSpace cmi_space_from_string(const std::string& s) {
    if (s == "feature") return CmiSpace::feature;
    if (s == "probability") return CmiSpace::probability;
    throw Error(ErrorKind::invalid_argument, "unknown CMI space " + s);
}

struct SimplexDistribution {
    std::vector<double> p;

    std::size_t size() const { return p.size(); }
    double operator[](std::size_t i) const { return p[i]; }
};

inline SimplexDistribution feature_softmax(std::span<const double> z) {
    if (z.empty()) throw Error(ErrorKind::invalid_argument, "softmax of an empty vector");
    double m = z[0];
    for (double v : z) {
        if (!std::isfinite(v)) throw Error(ErrorKind::non_finite, "softmax input must be finite");
        m = std::max(m, v);
    }
    SimplexDistribution out{std::vector<double>(z.size())};
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) total += out.p[i] = std::exp(z[i] - m);
    for (auto& v : out.p) v /= total;
    return out;
}

/// D(p || q) in nats. q is floored at kLogFloor; terms with p_i = 0 vanish.
inline double kl_divergence(const SimplexDistribution& p, const SimplexDistribution& q) {
    if (p.size() != q.size())
        throw Error(ErrorKind::shape_mismatch, "KL operands have lengths " + std::to_string(p.size()) + " and " +
                                                   std::to_string(q.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kLogFloor)));
    }
    return std::max(0.0, s);
}

struct ClassCentroid {
    int class_id = 0;
    SimplexDistribution q;
    std::size_t support = 0;
};

inline ClassCentroid class_centroid(std::span<const SimplexDistribution> dists, int class_id = 0) {
    if (dists.empty()) throw Error(ErrorKind::empty_class, "class " + std::to_string(class_id) + " has no members");
    const std::size_t m = dists.front().size();
    ClassCentroid c{class_id, {std::vector<double>(m, 0.0)}, dists.size()};
    for (const auto& d : dists) {
        if (d.size() != m) throw Error(ErrorKind::shape_mismatch, "centroid members differ in length");
        for (std::size_t i = 0; i < m; ++i) c.q.p[i] += d[i];
    }
    for (auto& v : c.q.p) v /= static_cast<double>(dists.size());
    return c;
}

// ---- differentiable estimator --------------------------------------------

/// Graph-level CMI terms: total and per-class contributions, each already
/// divided by the batch size so that the per-class values sum to the total.
struct CmiTerms {
    ad::Var total;
    std::map<int, ad::Var> per_class;
};

/// `outputs` holds one feature/logit row per labeled sample. With
/// detach_centroid the class centroids are treated as constants. Terms are
/// divided by `set_size` (default: the number of rows), which lets a single
/// class slice be scored against the size of the whole set.
inline CmiTerms cmi_terms(const ad::Var& outputs, std::span<const int> labels, bool detach_centroid = false,
                          std::size_t set_size = 0) {
    if (outputs.rows() != labels.size()) throw Error(ErrorKind::shape_mismatch, "one output row per label");
    if (labels.empty()) throw Error(ErrorKind::empty_class, "CMI of an empty set");
    const double inv_n = 1.0 / static_cast<double>(set_size == 0 ? labels.size() : set_size);

    ad::Var simplex = ad::softmax_rows(outputs);
    CmiTerms terms;
    const Matrix& sv = simplex.value();
    for (auto [label, idx] : partition_by_class(labels)) {
        // Canonical member order makes the floating-point sums independent of
        // how samples are arranged within the class.
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            auto ra = sv.row(a), rb = sv.row(b);
            return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
        });
        ad::Var members = ad::select_rows(simplex, idx);
        ad::Var centroid = ad::scale(ad::sum_rows(members), 1.0 / static_cast<double>(idx.size()));
        if (detach_centroid) centroid = ad::detach(centroid);
        ad::Var log_ratio =
            ad::sub(ad::log(ad::clamp_min(members, kLogFloor)), ad::log(ad::clamp_min(centroid, kLogFloor)));
        ad::Var contribution = ad::scale(ad::sum_all(ad::mul(members, log_ratio)), inv_n);
        terms.total = terms.total.defined() ? ad::add(terms.total, contribution) : contribution;
        terms.per_class.emplace(label, contribution);
    }
    return terms;
}

/// Network outputs that feed the simplex map for the chosen space.
inline ad::Var cmi_outputs(const TrainedProxy& proxy, std::span<const ad::Var> params, const ad::Var& samples,
                           CmiSpace space) {
    return space == CmiSpace::feature ? forward_features(proxy.arch, params, samples)
                                      : forward_logits(proxy.arch, params, samples);
}

// ---- reports --------------------------------------------------------------

struct CmiReport {
    double total = 0.0;
    std::map<int, double> per_class;
    CmiSpace space = CmiSpace::feature;
    std::string proxy_id;
    std::size_t num_samples = 0;
};

inline nlohmann::json to_json(const CmiReport& r) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [y, v] : r.per_class) per_class[std::to_string(y)] = v;
    return {{"total", r.total},
            {"per_class", per_class},
            {"space", to_string(r.space)},
            {"proxy_id", r.proxy_id},
            {"num_samples", r.num_samples}};
}

inline CmiReport cmi_report_from_json(const nlohmann::json& j) {
    CmiReport r;
    r.total = j.at("total").get<double>();
    for (const auto& [k, v] : j.at("per_class").items()) r.per_class[std::stoi(k)] = v.get<double>();
    r.space = cmi_space_from_string(j.at("space").get<std::string>());
    r.proxy_id = j.at("proxy_id").get<std::string>();
    r.num_samples = j.at("num_samples").get<std::size_t>();
    return r;
}

inline CmiReport empirical_cmi(const Matrix& samples, std::span<const int> labels, const TrainedProxy& proxy,
                               CmiSpace space) {
    ad::NoGradGuard guard;
    auto params = proxy.param_vars();
    CmiTerms terms = cmi_terms(cmi_outputs(proxy, params, ad::Var::constant(samples), space), labels);
    CmiReport r;
    r.total = terms.total.item();
    for (const auto& [y, v] : terms.per_class) r.per_class[y] = v.item();
    r.space = space;
    r.proxy_id = proxy.id;
    r.num_samples = labels.size();
    return r;
}

inline CmiReport empirical_cmi(const SyntheticDataset& s, const TrainedProxy& proxy, CmiSpace space) {
    return empirical_cmi(s.samples, s.labels(), proxy, space);
}

/// Contribution of class y, normalized by the full set size.
inline double empirical_cmi_per_class(const Matrix& samples, std::span<const int> labels, const TrainedProxy& proxy,
                                      CmiSpace space, int y) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == y) members.push_back(i);
    if (members.empty()) throw Error(ErrorKind::empty_class, "class " + std::to_string(y) + " has no samples");
    ad::NoGradGuard guard;
    auto params = proxy.param_vars();
    ad::Var outputs = cmi_outputs(proxy, params, ad::select_rows(ad::Var::constant(samples), members), space);
    std::vector<int> class_labels(members.size(), y);
    return cmi_terms(outputs, class_labels, false, labels.size()).total.item();
}

inline double empirical_cmi_per_class(const SyntheticDataset& s, const TrainedProxy& proxy, CmiSpace space, int y) {
    return empirical_cmi_per_class(s.samples, s.labels(), proxy, space, y);
}

}  // namespace cmidd
