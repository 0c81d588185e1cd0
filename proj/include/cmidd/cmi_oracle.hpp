#pragma once

// Scalar reference for the class-aware CMI, written as the literal nested
// expansion sum_y P(y) sum_s P(s|y) sum_i P(i|s) ln(P(i|s) / P(i|y)).
// It shares no code with the graph-based estimator beyond the network
// forward pass and is meant for tests only.

#include <cmath>
#include <set>
#include <span>

#include "cmidd/cmi.hpp"
#include "cmidd/models.hpp"

namespace cmidd::oracle {

inline double softmax_component(std::span<const double> z, std::size_t i) {
    double m = z[0];
    for (double v : z) m = v > m ? v : m;
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - m);
    return std::exp(z[i] - m) / denom;
}

inline double cmi_from_outputs(const Matrix& outputs, std::span<const int> labels) {
    if (outputs.rows != labels.size() || labels.empty())
        throw Error(ErrorKind::empty_class, "oracle needs one non-empty output row per label");
    const std::size_t n = labels.size(), m = outputs.cols;
    std::set<int> classes(labels.begin(), labels.end());

    double cmi = 0.0;
    for (int y : classes) {
        std::size_t n_y = 0;
        for (int l : labels) n_y += l == y;
        const double p_y = static_cast<double>(n_y) / static_cast<double>(n);
        const double p_s_given_y = 1.0 / static_cast<double>(n_y);

        double conditional = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            if (labels[s] != y) continue;
            double divergence = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                double p = softmax_component(outputs.row(s), i);
                double q = 0.0;
                for (std::size_t t = 0; t < n; ++t)
                    if (labels[t] == y) q += p_s_given_y * softmax_component(outputs.row(t), i);
                if (p > 0.0) divergence += p * std::log(p / q);
            }
            conditional += p_s_given_y * divergence;
        }
        cmi += p_y * conditional;
    }
    return cmi;
}

/// CMI of `outputs` measured against class centroids taken from
/// `centroid_outputs` (same labels). Reference for the detached-centroid
/// gradient, where the centroids are held fixed while the samples move.
inline double cmi_with_frozen_centroids(const Matrix& outputs, const Matrix& centroid_outputs,
                                        std::span<const int> labels) {
    const std::size_t n = labels.size(), m = outputs.cols;
    std::set<int> classes(labels.begin(), labels.end());
    double cmi = 0.0;
    for (int y : classes) {
        std::size_t n_y = 0;
        for (int l : labels) n_y += l == y;
        for (std::size_t s = 0; s < n; ++s) {
            if (labels[s] != y) continue;
            for (std::size_t i = 0; i < m; ++i) {
                double p = softmax_component(outputs.row(s), i);
                double q = 0.0;
                for (std::size_t t = 0; t < n; ++t)
                    if (labels[t] == y) q += softmax_component(centroid_outputs.row(t), i) / static_cast<double>(n_y);
                if (p > 0.0) cmi += p * std::log(p / q);
            }
        }
    }
    return cmi / static_cast<double>(n);
}

inline double cmi_oracle(const Matrix& samples, std::span<const int> labels, const TrainedProxy& proxy, CmiSpace space) {
    Matrix outputs = space == CmiSpace::feature ? extract_features(proxy, samples) : classify(proxy, samples);
    return cmi_from_outputs(outputs, labels);
}

inline double cmi_oracle(const SyntheticDataset& s, const TrainedProxy& proxy, CmiSpace space) {
    return cmi_oracle(s.samples, s.labels(), proxy, space);
}

}  // namespace cmidd::oracle
