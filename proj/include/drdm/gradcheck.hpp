#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "drdm/engine.hpp"
#include "drdm/nn/denoiser.hpp"

namespace drdm {

struct BlockCheck {
    std::string name;
    std::size_t size = 0;
    double rel_error = 0.0;  // |g_analytic - g_fd| / (|g_analytic| + |g_fd|), normwise
};

struct GradcheckReport {
    std::vector<BlockCheck> blocks;
    double max_rel_error() const {
        double m = 0.0;
        for (const auto& b : blocks) m = std::max(m, b.rel_error);
        return m;
    }
};

/// Small conditioning window with random fields.
inline nn::SampleCond gradcheck_fixture(Extent e, RngStream rng, int surface_classes = 3, int aoi_classes = 4,
                                        int poi_dim = 3) {
    nn::SampleCond s;
    s.extent = e;
    s.surface_classes = surface_classes;
    s.aoi_classes = aoi_classes;
    s.poi_dim = poi_dim;
    for (int c = 0; c < e.h * e.w; ++c) {
        s.surface.push_back(rng.uniform_int(0, surface_classes));
        s.aoi.push_back(rng.uniform_int(0, aoi_classes));
        for (int d = 0; d < poi_dim; ++d) s.poi.push_back(rng.uniform());
    }
    for (std::size_t i = 0; i < e.size(); ++i) s.population.push_back(rng.uniform());
    return s;
}

/// Analytic vs central-difference gradients of the fused training loss for
/// every parameter block of a small denoiser with randomized weights.
/// `fault_block` scales one block's analytic gradient (detection test).
inline GradcheckReport gradient_check(std::uint64_t seed = 0, const std::string& fault_block = "", double step = 1e-5) {
    const Extent e{2, 4, 4};
    nn::DenoiserConfig cfg;
    cfg.latent = 6;
    cfg.hidden = 5;
    cfg.channels = 4;
    cfg.surface_classes = 3;
    cfg.aoi_classes = 4;
    cfg.poi_dim = 3;
    cfg.city_h = 4;
    cfg.city_w = 4;
    cfg.spatial_levels = {1};
    cfg.fusion_dim = 3;
    cfg.seed = seed;
    nn::Denoiser net(cfg);
    RngStream rng(seed, "gradcheck");
    auto init = rng.child("params");
    for (auto* b : net.blocks())
        for (double& v : b->value) v = 0.4 * init.normal();
    net.fault_block = fault_block;

    const auto cond = gradcheck_fixture(e, rng.child("cond"));
    auto data = rng.child("data");
    const auto x = normals(data, e.size());
    auto h = normals(data, e.size());
    const auto eps = normals(data, e.size());
    const double alpha = 0.6;
    const int n = 7;
    const ResolutionLevel level{1, 1, 1, "fine"};
    const auto prior = scaled(h, prior_ratio(alpha));

    auto loss_of = [&](bool grads) {
        nn::Denoiser::Cache cache;
        const auto out = net.forward_train(x, h, n, alpha, cond, level, cache);
        std::vector<double> d;
        const double l = prior_loss(out, prior, eps, &*net.fusion, grads ? &d : nullptr);
        if (grads) net.backward(cache, d);
        return l;
    };

    nn::zero_grad(net.blocks());
    loss_of(true);
    GradcheckReport rep;
    for (auto* b : net.blocks()) {
        double diff = 0.0, na = 0.0, nf = 0.0;
        for (std::size_t j = 0; j < b->size(); ++j) {
            const double keep = b->value[j];
            b->value[j] = keep + step;
            const double lp = loss_of(false);
            b->value[j] = keep - step;
            const double lm = loss_of(false);
            b->value[j] = keep;
            const double fd = (lp - lm) / (2.0 * step);
            diff += (b->grad[j] - fd) * (b->grad[j] - fd);
            na += b->grad[j] * b->grad[j];
            nf += fd * fd;
        }
        const double denom = std::sqrt(na) + std::sqrt(nf);
        rep.blocks.push_back({b->name, b->size(), denom > 0.0 ? std::sqrt(diff) / denom : 0.0});
    }
    return rep;
}

} // namespace drdm
