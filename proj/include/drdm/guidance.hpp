#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "drdm/error.hpp"
#include "drdm/grid.hpp"
#include "drdm/nn/param.hpp"
#include "drdm/rng.hpp"

namespace drdm {

/// plus: eps_theta + P targets the sampled noise. minus: eps_theta - P does.
enum class PriorSign { plus, minus };

inline std::string to_string(PriorSign s) { return s == PriorSign::plus ? "plus" : "minus"; }
inline PriorSign parse_prior_sign(const std::string& s) {
    if (s == "plus") return PriorSign::plus;
    if (s == "minus") return PriorSign::minus;
    throw ConfigError("unknown prior_sign '" + s + "'");
}

/// sqrt(alpha) / sqrt(1 - alpha).
inline double prior_ratio(double alpha) { return std::sqrt(alpha) / std::sqrt(1.0 - alpha); }

struct PriorNoise {
    Grid tensor;
    int source_level = 0;
    double alpha_used = 0.0;
};

/// Prior offset for stage k built from the stage k-1 field. Zero for k = 1.
inline PriorNoise prior_noise(const Grid& coarse_prev, double alpha, int k, const ResolutionLevel& target,
                              UpsampleMode mode = UpsampleMode::replicate_mean) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ScheduleError("prior_noise: alpha must lie strictly inside (0, 1), got " + std::to_string(alpha));
    Grid up = upsample_to(coarse_prev, target, mode);
    PriorNoise p{std::move(up), k - 1, alpha};
    const double r = k == 1 ? 0.0 : prior_ratio(alpha);
    for (double& v : p.tensor.values()) v *= r;
    return p;
}

struct ResidualDecomposition {
    std::vector<double> delta_x0;
    std::vector<double> prior_component;
    std::vector<double> delta_eps;
    std::vector<double> hat_eps;
};

/// Splits x0 = H + dx0 and eps = d_eps - hat_eps with hat_eps = sqrt(a) H / sqrt(1 - a).
inline ResidualDecomposition residual_decompose(const std::vector<double>& x0, const std::vector<double>& h,
                                                double alpha, const std::vector<double>& eps) {
    if (x0.size() != h.size() || x0.size() != eps.size()) throw ShapeError("residual_decompose: size mismatch");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ScheduleError("residual_decompose: alpha must be interior");
    ResidualDecomposition r;
    r.prior_component = h;
    const double ratio = prior_ratio(alpha);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        r.delta_x0.push_back(x0[i] - h[i]);
        r.hat_eps.push_back(ratio * h[i]);
        r.delta_eps.push_back(eps[i] + r.hat_eps.back());
    }
    return r;
}

/// Per-cell latent fusion of predicted noise e and prior p:
///   out = e + s p + sum_i we_i tanh(a_i e + b_i) + sum_i wp_i tanh(c_i p + d_i) + b_o
/// The tanh features are the two D-wide latents; (we, wp, b_o) is the output
/// projection of their concatenation. The linear skip (1, s) is fixed, with
/// s = +1 for plus and -1 for minus.
struct FusionParams {
    int D = 0;
    double prior_gain = 1.0;
    nn::ParamBlock noise_in;  // D x 2: (a_i, b_i)
    nn::ParamBlock prior_in;  // D x 2: (c_i, d_i)
    nn::ParamBlock out;       // 2D + 1: (we, wp, b_o)

    FusionParams() = default;

    /// Identity-bypass initialization: the latent read-out starts at zero.
    FusionParams(int d, PriorSign sign, RngStream rng)
        : D(d), prior_gain(sign == PriorSign::plus ? 1.0 : -1.0), noise_in("fusion.noise_in", {d, 2}),
          prior_in("fusion.prior_in", {d, 2}), out("fusion.out", {2 * d + 1}) {
        if (d < 1) throw ConfigError("fusion: D must be >= 1");
        for (int i = 0; i < d; ++i) {
            noise_in.value[2 * i] = 0.5 * rng.normal();
            noise_in.value[2 * i + 1] = 0.5 * rng.normal();
            prior_in.value[2 * i] = 0.5 * rng.normal();
            prior_in.value[2 * i + 1] = 0.5 * rng.normal();
        }
    }

    nn::BlockList blocks() { return {&noise_in, &prior_in, &out}; }

    double apply(double e, double p) const {
        double s = e + prior_gain * p + out.value[2 * D];
        for (int i = 0; i < D; ++i) {
            s += out.value[i] * std::tanh(noise_in.value[2 * i] * e + noise_in.value[2 * i + 1]);
            s += out.value[D + i] * std::tanh(prior_in.value[2 * i] * p + prior_in.value[2 * i + 1]);
        }
        return s;
    }

    /// Accumulates parameter gradients for upstream gradient g; returns g * d out / d e.
    double backward(double e, double p, double g) {
        out.grad[2 * D] += g;
        double de = g;
        for (int i = 0; i < D; ++i) {
            const double te = std::tanh(noise_in.value[2 * i] * e + noise_in.value[2 * i + 1]);
            const double tp = std::tanh(prior_in.value[2 * i] * p + prior_in.value[2 * i + 1]);
            out.grad[i] += g * te;
            out.grad[D + i] += g * tp;
            const double ue = g * out.value[i] * (1.0 - te * te);
            const double up = g * out.value[D + i] * (1.0 - tp * tp);
            noise_in.grad[2 * i] += ue * e;
            noise_in.grad[2 * i + 1] += ue;
            prior_in.grad[2 * i] += up * p;
            prior_in.grad[2 * i + 1] += up;
            de += ue * noise_in.value[2 * i];
        }
        return de;
    }
};

inline std::vector<double> fuse_noise(const std::vector<double>& eps_pred, const std::vector<double>& prior,
                                      const FusionParams& params) {
    if (eps_pred.size() != prior.size()) throw ShapeError("fuse_noise: size mismatch");
    std::vector<double> out(eps_pred.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = params.apply(eps_pred[i], prior[i]);
    return out;
}

inline Grid fuse_noise(const Grid& eps_pred, const PriorNoise& prior, const FusionParams& params) {
    require_same_extent(eps_pred, prior.tensor, "fuse_noise");
    Grid out = eps_pred;
    out.storage() = fuse_noise(eps_pred.storage(), prior.tensor.storage(), params);
    return out;
}

} // namespace drdm
