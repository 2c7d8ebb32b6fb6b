#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "drdm/guidance.hpp"
#include "drdm/nn/encoding.hpp"
#include "drdm/nn/layers.hpp"

namespace drdm::nn {

struct DenoiserConfig {
    int latent = 64;    // E
    int hidden = 64;    // mapper hidden width
    int channels = 32;  // trunk width C
    int surface_classes = 3, aoi_classes = 4, poi_dim = 8;
    int city_h = 32, city_w = 32;
    std::vector<int> spatial_levels = {8, 4, 2, 1};
    bool use_tpe = true;
    bool use_spe = true;
    int fusion_dim = 32;  // 0 disables the prior pathway
    PriorSign prior_sign = PriorSign::minus;
    std::uint64_t seed = 0;
};

/// Shared conditional noise estimator.
///
/// v = x - sqrt(alpha) H, with H the coarse prior field (v = x when there is none)
/// h0 = conv_in([x, v]) + P_c(context) + P_t(TPE) + P_s(SPE) + P_n(step)
/// h1 = h0 + conv1(relu h0), h2 = h1 + conv2(relu h1)
/// F = conv_out(relu h2) + u_x x + u_v v
/// out = (x - sqrt(alpha) (sqrt(alpha) v + F)) / sqrt(1 - alpha)
///
/// With the minus fusion (out - P) the implied clean estimate is
/// H + sqrt(alpha) v + F, so F learns the residual around the prior.
/// alpha is the caller's clamped schedule value.
class Denoiser {
public:
    DenoiserConfig config;
    UecEncoder uec;
    Linear ctx_proj, tpe_proj, spe_proj, step_proj;
    std::map<int, ParamBlock> spe;  // delta -> (H/delta * W/delta) x 128
    Conv3x3 conv_in, conv1, conv2, conv_out;
    ParamBlock out_skip{"out_skip", {2}};  // (u_x, u_v)
    std::optional<FusionParams> fusion;

    /// Incremented by every forward() call.
    mutable std::size_t forward_calls = 0;

    /// Test hook: scales the gradient of the named block during backward.
    std::string fault_block;

    explicit Denoiser(DenoiserConfig cfg) : config(std::move(cfg)) {
        const int E = config.latent, C = config.channels;
        if (C < 1 || E < 1) throw ConfigError("denoiser: widths must be positive");
        uec = UecEncoder(config.surface_classes, config.aoi_classes, config.poi_dim, E, config.hidden);
        ctx_proj = Linear("ctx_proj", E, C);
        tpe_proj = Linear("tpe_proj", kPeDim, C, false);
        spe_proj = Linear("spe_proj", kPeDim, C, false);
        step_proj = Linear("step_proj", kPeDim, C, false);
        std::set<int> deltas(config.spatial_levels.begin(), config.spatial_levels.end());
        for (int d : deltas) {
            if (d < 1 || config.city_h % d || config.city_w % d)
                throw ConfigError("denoiser: spatial level " + std::to_string(d) + " does not divide the city");
            spe.emplace(d, ParamBlock("spe.d" + std::to_string(d), {(config.city_h / d) * (config.city_w / d), kPeDim}));
        }
        conv_in = Conv3x3("conv_in", 2, C);
        conv1 = Conv3x3("conv1", C, C);
        conv2 = Conv3x3("conv2", C, C);
        conv_out = Conv3x3("conv_out", C, 1);
        if (config.fusion_dim > 0)
            fusion.emplace(config.fusion_dim, config.prior_sign, RngStream(config.seed, "init.fusion"));

        RngStream rng(config.seed, "init");
        uec.init(rng.child("uec"));
        ctx_proj.init(rng.child("ctx_proj"), 1.0);
        tpe_proj.init(rng.child("tpe_proj"), 1.0);
        spe_proj.init(rng.child("spe_proj"), 1.0);
        step_proj.init(rng.child("step_proj"), 1.0);
        for (auto& [d, block] : spe) {
            auto r = rng.child("spe").child(static_cast<std::uint64_t>(d));
            block.fill_normal(r, 0.02);
        }
        conv_in.init(rng.child("conv_in"));
        conv1.init(rng.child("conv1"), 1.0);
        conv2.init(rng.child("conv2"), 1.0);
        // conv_out and out_skip start at zero, so F = 0 at init.
    }

    Denoiser(const Denoiser&) = default;
    Denoiser& operator=(const Denoiser&) = default;

    BlockList blocks() {
        BlockList out;
        uec.blocks(out);
        ctx_proj.blocks(out);
        tpe_proj.blocks(out);
        spe_proj.blocks(out);
        step_proj.blocks(out);
        for (auto& [d, block] : spe) out.push_back(&block);
        conv_in.blocks(out);
        conv1.blocks(out);
        conv2.blocks(out);
        conv_out.blocks(out);
        out.push_back(&out_skip);
        if (fusion)
            for (auto* b : fusion->blocks()) out.push_back(b);
        return out;
    }

    std::size_t parameter_count() { return nn::parameter_count(blocks()); }

    struct Cache {
        SampleCond cond;
        UecEncoder::Cache uec;
        Mat fused;  // encode_uec output
        LevelCondition lc;
        Layout layout;
        Mat step_emb;  // 1 x 128
        double alpha = 0.5;
        Mat x, cols_in, h0, cols1, h1, cols2, h2, cols_out;
    };

    /// encode_uec: fused per-cell latent of a window.
    Mat encode(const SampleCond& s, UecEncoder::Cache* cache = nullptr) const { return uec.forward(s, cache); }

    /// The part of h0 that depends on neither x nor n.
    Mat condition_bias(const LevelCondition& lc) const {
        const Layout l{lc.extent.t, lc.extent.h, lc.extent.w};
        Mat bias = ctx_proj.forward(lc.context);
        add_positional(bias, lc, l);
        return bias;
    }

    /// Predicts the residual noise for state x (rows (t, i, j)) at lc's level.
    std::vector<double> forward(const std::vector<double>& x, const std::vector<double>& h, int n, double alpha,
                                const LevelCondition& lc, Cache* cache = nullptr,
                                const Mat* precomputed_bias = nullptr) const {
        ++forward_calls;
        const Layout l{lc.extent.t, lc.extent.h, lc.extent.w};
        if (static_cast<int>(x.size()) != l.rows())
            throw ShapeError("predict_noise: state has " + std::to_string(x.size()) + " cells, level " + lc.level.label +
                             " expects " + std::to_string(l.rows()));
        if (!h.empty() && h.size() != x.size()) throw ShapeError("predict_noise: prior field does not match the state");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ScheduleError("predict_noise: alpha must be interior");
        Mat xm(l.rows(), 2);
        xm.col(0) = CVecMap(x.data(), l.rows());
        xm.col(1) = xm.col(0);
        if (!h.empty()) xm.col(1) -= std::sqrt(alpha) * CVecMap(h.data(), l.rows());
        Mat cols_in, cols1, cols2, cols_out;
        const bool keep = cache != nullptr;
        Mat h0 = conv_in.forward(xm, l, keep ? &cols_in : nullptr);
        if (precomputed_bias)
            h0 += *precomputed_bias;
        else
            h0 += condition_bias(lc);
        h0.rowwise() += step_proj.forward(step_embedding(n)).row(0);
        Mat h1 = h0 + conv1.forward(relu(h0), l, keep ? &cols1 : nullptr);
        Mat h2 = h1 + conv2.forward(relu(h1), l, keep ? &cols2 : nullptr);
        Mat f = conv_out.forward(relu(h2), l, keep ? &cols_out : nullptr);
        f += out_skip.value[0] * xm.col(0) + out_skip.value[1] * xm.col(1);
        const auto k = output_coefficients(alpha);
        Mat out = k.x * xm.col(0) + k.v * xm.col(1) + k.f * f;
        if (cache) {
            cache->lc = lc;
            cache->layout = l;
            cache->step_emb = step_embedding(n);
            cache->alpha = alpha;
            cache->x = std::move(xm);
            cache->cols_in = std::move(cols_in);
            cache->cols1 = std::move(cols1);
            cache->cols2 = std::move(cols2);
            cache->cols_out = std::move(cols_out);
            cache->h0 = std::move(h0);
            cache->h1 = std::move(h1);
            cache->h2 = std::move(h2);
        }
        return {out.data(), out.data() + out.size()};
    }

    /// Full forward from raw conditioning fields, recording everything backward needs.
    std::vector<double> forward_train(const std::vector<double>& x, const std::vector<double>& h, int n, double alpha,
                                      const SampleCond& s, const ResolutionLevel& level, Cache& cache) const {
        cache.cond = s;
        cache.fused = encode(s, &cache.uec);
        LevelCondition lc = condition_series(cache.fused, s, level, config.city_w);
        return forward(x, h, n, alpha, lc, &cache);
    }

    /// Accumulates gradients of every block for upstream gradient d_out.
    void backward(Cache& c, const std::vector<double>& d_out) {
        const Layout& l = c.layout;
        Mat dout = CMatMap(d_out.data(), l.rows(), 1);
        Mat df = output_coefficients(c.alpha).f * dout;
        out_skip.grad[0] += df.cwiseProduct(c.x.col(0)).sum();
        out_skip.grad[1] += df.cwiseProduct(c.x.col(1)).sum();
        Mat dh2 = relu_backward(c.h2, conv_out.backward(c.cols_out, df, l));
        Mat dh1 = dh2 + relu_backward(c.h1, conv2.backward(c.cols2, dh2, l));
        Mat dh0 = dh1 + relu_backward(c.h0, conv1.backward(c.cols1, dh1, l));
        conv_in.backward(c.cols_in, dh0, l);

        Mat dctx = ctx_proj.backward(c.lc.context, dh0);
        const int hw = l.H * l.W;
        if (config.use_tpe) {
            Mat dt = Mat::Zero(l.B, dh0.cols());
            for (int t = 0; t < l.B; ++t) dt.row(t) = dh0.middleRows(static_cast<Eigen::Index>(t) * hw, hw).colwise().sum();
            tpe_proj.backward(c.lc.tpe, dt);
        }
        if (config.use_spe) {
            Mat ds = Mat::Zero(hw, dh0.cols());
            for (int t = 0; t < l.B; ++t) ds += dh0.middleRows(static_cast<Eigen::Index>(t) * hw, hw);
            Mat table_rows = gather_spe(c.lc);
            Mat drows = spe_proj.backward(table_rows, ds);
            auto& block = spe.at(c.lc.level.spatial);
            for (int r = 0; r < hw; ++r)
                for (int d = 0; d < kPeDim; ++d) block.grad[static_cast<std::size_t>(c.lc.spe_rows[r]) * kPeDim + d] += drows(r, d);
        }
        step_proj.backward(c.step_emb, dh0.colwise().sum());

        Mat dfused = coarsen_rows_mean_backward(dctx, c.cond.extent, c.lc.level.temporal, c.lc.level.spatial);
        uec.backward(c.cond, c.uec, dfused);

        if (!fault_block.empty())
            for (auto* b : blocks())
                if (b->name == fault_block)
                    for (auto& g : b->grad) g *= 1.5;
    }

    struct OutputCoefficients {
        double x, v, f;
    };

    /// out = x * x-coefficient + v * v-coefficient + F * f-coefficient.
    static OutputCoefficients output_coefficients(double alpha) {
        const double r = std::sqrt(alpha / (1.0 - alpha));
        return {1.0 / std::sqrt(1.0 - alpha), -r * std::sqrt(alpha), -r};
    }

    static Mat step_embedding(int n) {
        const auto v = tpe(n);
        return CMatMap(v.data(), 1, kPeDim);
    }

    void save(TensorBundle& bundle) {
        blocks_to_bundle(blocks(), bundle);
        bundle.metadata["parameter_count"] = parameter_count();
    }
    void load(const TensorBundle& bundle) { blocks_from_bundle(blocks(), bundle); }

private:
    Mat gather_spe(const LevelCondition& lc) const {
        const auto& block = spe.at(lc.level.spatial);
        Mat rows(static_cast<Eigen::Index>(lc.spe_rows.size()), kPeDim);
        for (std::size_t r = 0; r < lc.spe_rows.size(); ++r)
            for (int d = 0; d < kPeDim; ++d) rows(static_cast<Eigen::Index>(r), d) = block.value[static_cast<std::size_t>(lc.spe_rows[r]) * kPeDim + d];
        return rows;
    }

    void add_positional(Mat& bias, const LevelCondition& lc, const Layout& l) const {
        const int hw = l.H * l.W;
        if (config.use_tpe) {
            Mat pt = tpe_proj.forward(lc.tpe);
            for (int t = 0; t < l.B; ++t) bias.middleRows(static_cast<Eigen::Index>(t) * hw, hw).rowwise() += pt.row(t);
        }
        if (config.use_spe) {
            if (!spe.count(lc.level.spatial))
                throw ShapeError("predict_noise: no spatial embedding for level " + lc.level.label);
            Mat ps = spe_proj.forward(gather_spe(lc));
            for (int t = 0; t < l.B; ++t) bias.middleRows(static_cast<Eigen::Index>(t) * hw, hw) += ps;
        }
    }
};

} // namespace drdm::nn
