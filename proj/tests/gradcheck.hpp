#pragma once

// Finite-difference check of the gradient of the CMI-enhanced loss with
// respect to the synthetic samples. Shared by the unit and acceptance suites.

#include <random>

#include "cmidd/cmi_oracle.hpp"
#include "cmidd/distill.hpp"

namespace cmidd::testing {

struct GradCheckResult {
    double max_relative_error = 0.0;
    double gradient_norm = 0.0;
};

inline GradCheckResult check_loss_gradient(Objective objective, CmiSpace space, bool detach, std::uint64_t seed,
                                           double lambda = 10.0, double h = 1e-5) {
    auto real = make_blobs(2, 20, 3, 0.8, seed);
    ArchSpec arch;
    arch.input_shape = {3};
    arch.hidden_widths = {6, 4};
    arch.feature_dim = 4;
    arch.num_classes = 2;
    TrainedProxy proxy = build_model(arch, seed + 1);
    TrainedProxy backbone = build_model(arch, seed + 2);
    const TrainedProxy& matcher = objective == Objective::dm ? proxy : backbone;

    DistillConfig cfg;
    cfg.objective = objective;
    cfg.lambda = lambda;
    cfg.cmi_space = space;
    cfg.detach_centroid = detach;
    cfg.ipc = 4;
    SyntheticDataset s = init_synthetic(real, 4, InitMode::noise, seed + 3);  // 8 samples
    RealBatch batch = sample_real_batch(real, 5, seed + 4, 0);

    auto analytic = cmi_enhanced_loss_with_grad(s.samples, s.labels(), batch, proxy, matcher, cfg, 0);
    const Matrix frozen = s.samples;
    auto params = proxy.param_vars();
    auto outputs = [&](const Matrix& x) {
        ad::NoGradGuard guard;
        return cmi_outputs(proxy, params, ad::Var::constant(x), space).value();
    };
    auto value = [&](const Matrix& x) {
        auto bd = cmi_enhanced_loss_with_grad(x, s.labels(), batch, proxy, matcher, cfg, 0).breakdown;
        if (!detach) return bd.total;
        return bd.l_dd + lambda * oracle::cmi_with_frozen_centroids(outputs(x), outputs(frozen), s.labels());
    };
    Matrix numeric(frozen.rows, frozen.cols);
    Matrix x = frozen;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x.data[i];
        x.data[i] = keep + h;
        const double up = value(x);
        x.data[i] = keep - h;
        const double down = value(x);
        x.data[i] = keep;
        numeric.data[i] = (up - down) / (2 * h);
    }
    GradCheckResult r;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
        double a = analytic.gradient.data[i], b = numeric.data[i];
        double scale = std::max({std::abs(a), std::abs(b), 1e-8});
        r.max_relative_error = std::max(r.max_relative_error, std::abs(a - b) / scale);
        r.gradient_norm += a * a;
    }
    r.gradient_norm = std::sqrt(r.gradient_norm);
    return r;
}

}  // namespace cmidd::testing
