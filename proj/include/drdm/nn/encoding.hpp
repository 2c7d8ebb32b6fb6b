#pragma once

#include <cmath>
#include <vector>

#include "drdm/city.hpp"
#include "drdm/nn/layers.hpp"

namespace drdm::nn {

inline constexpr int kPeDim = 128;

/// Sinusoidal encoding: entry 2i = sin(t / 10000^(2i/128)), 2i+1 = cos(same).
inline std::vector<double> tpe(long long t) {
    if (t < 0) throw ShapeError("tpe: t must be >= 0");
    std::vector<double> v(kPeDim);
    for (int i = 0; i < kPeDim / 2; ++i) {
        const double arg = static_cast<double>(t) / std::pow(10000.0, 2.0 * i / kPeDim);
        v[2 * i] = std::sin(arg);
        v[2 * i + 1] = std::cos(arg);
    }
    return v;
}

/// Conditioning fields for one sample window, in finest units.
struct SampleCond {
    Origin origin;
    Extent extent;
    int surface_classes = 0, aoi_classes = 0, poi_dim = 0;
    std::vector<int> surface, aoi;   // H*W
    std::vector<double> poi;         // (H*W) x d, cell-major
    std::vector<double> population;  // T*H*W
};

inline SampleCond slice_context(const UrbanContext& ctx, Origin o, Extent e) {
    if (o.t0 < 0 || o.i0 < 0 || o.j0 < 0 || o.t0 + e.t > ctx.t || o.i0 + e.h > ctx.h || o.j0 + e.w > ctx.w)
        throw ShapeError("slice_context: window " + to_string(e) + " outside the city");
    SampleCond s;
    s.origin = o;
    s.extent = e;
    s.surface_classes = ctx.surface_classes;
    s.aoi_classes = ctx.aoi_classes;
    s.poi_dim = ctx.poi_dim;
    for (int i = 0; i < e.h; ++i)
        for (int j = 0; j < e.w; ++j) {
            const auto c = ctx.cell(o.i0 + i, o.j0 + j);
            s.surface.push_back(ctx.surface[c]);
            s.aoi.push_back(ctx.aoi[c]);
            for (int d = 0; d < ctx.poi_dim; ++d) s.poi.push_back(ctx.poi_at(d, o.i0 + i, o.j0 + j));
        }
    for (int t = 0; t < e.t; ++t)
        for (int i = 0; i < e.h; ++i)
            for (int j = 0; j < e.w; ++j) s.population.push_back(ctx.pop_at(o.t0 + t, o.i0 + i, o.j0 + j));
    return s;
}

/// Class c > 0 maps to unit vector c-1; class 0 (background) to zeros.
inline Mat one_hot(const std::vector<int>& classes, int n_classes) {
    Mat m = Mat::Zero(static_cast<Eigen::Index>(classes.size()), std::max(1, n_classes - 1));
    for (std::size_t r = 0; r < classes.size(); ++r) {
        if (classes[r] < 0 || classes[r] >= n_classes) throw ShapeError("one_hot: class out of range");
        if (classes[r] > 0) m(static_cast<Eigen::Index>(r), classes[r] - 1) = 1.0;
    }
    return m;
}

/// Block mean over (tau, delta, delta) of a row-per-cell tensor laid out (t, i, j).
inline Mat coarsen_rows_mean(const Mat& x, const Extent& e, int tau, int delta) {
    if (e.t % tau || e.h % delta || e.w % delta) throw ShapeError("condition_series: non-divisible factor");
    const int T = e.t / tau, H = e.h / delta, W = e.w / delta;
    Mat out = Mat::Zero(T * H * W, x.cols());
    for (int t = 0; t < e.t; ++t)
        for (int i = 0; i < e.h; ++i)
            for (int j = 0; j < e.w; ++j)
                out.row(((t / tau) * H + i / delta) * W + j / delta) += x.row((t * e.h + i) * e.w + j);
    out /= static_cast<double>(tau * delta * delta);
    return out;
}

/// Adjoint of coarsen_rows_mean.
inline Mat coarsen_rows_mean_backward(const Mat& dy, const Extent& e, int tau, int delta) {
    const int H = e.h / delta, W = e.w / delta;
    Mat dx(static_cast<Eigen::Index>(e.size()), dy.cols());
    const double inv = 1.0 / (tau * delta * delta);
    for (int t = 0; t < e.t; ++t)
        for (int i = 0; i < e.h; ++i)
            for (int j = 0; j < e.w; ++j)
                dx.row((t * e.h + i) * e.w + j) = dy.row(((t / tau) * H + i / delta) * W + j / delta) * inv;
    return dx;
}

/// The four context mappers. Output rows are (t, i, j) cells of the window,
/// columns the E-dim latent; static fields broadcast over time.
struct UecEncoder {
    Mlp f1, f2, f3, f4;
    int E = 0;

    UecEncoder() = default;
    UecEncoder(int surface_classes, int aoi_classes, int poi_dim, int e, int hidden = 64)
        : f1("uec.f1", std::max(1, surface_classes - 1), hidden, e), f2("uec.f2", std::max(1, aoi_classes - 1), hidden, e),
          f3("uec.f3", poi_dim, hidden, e), f4("uec.f4", 1, hidden, e), E(e) {}

    void init(RngStream rng) {
        f1.init(rng.child("f1"));
        f2.init(rng.child("f2"));
        f3.init(rng.child("f3"));
        f4.init(rng.child("f4"));
    }

    struct Cache {
        Mlp::Cache c1, c2, c3, c4;
    };

    Mat forward(const SampleCond& s, Cache* cache) const {
        const int hw = s.extent.h * s.extent.w;
        Mat poi = CMatMap(s.poi.data(), hw, s.poi_dim);
        Mat pop = CMatMap(s.population.data(), static_cast<Eigen::Index>(s.population.size()), 1);
        Mat st = f1.forward(one_hot(s.surface, s.surface_classes), cache ? &cache->c1 : nullptr) +
                 f2.forward(one_hot(s.aoi, s.aoi_classes), cache ? &cache->c2 : nullptr) +
                 f3.forward(poi, cache ? &cache->c3 : nullptr);
        Mat out = f4.forward(pop, cache ? &cache->c4 : nullptr);
        for (int t = 0; t < s.extent.t; ++t) out.middleRows(static_cast<Eigen::Index>(t) * hw, hw) += st;
        return out;
    }

    void backward(const SampleCond& s, const Cache& c, const Mat& dc) {
        const int hw = s.extent.h * s.extent.w;
        Mat dst = Mat::Zero(hw, E);
        for (int t = 0; t < s.extent.t; ++t) dst += dc.middleRows(static_cast<Eigen::Index>(t) * hw, hw);
        f1.backward(c.c1, dst);
        f2.backward(c.c2, dst);
        f3.backward(c.c3, dst);
        f4.backward(c.c4, dc);
    }

    void blocks(BlockList& out) {
        f1.blocks(out);
        f2.blocks(out);
        f3.blocks(out);
        f4.blocks(out);
    }
};

/// Per-level slice of the condition series for one sample.
struct LevelCondition {
    ResolutionLevel level;
    Extent extent;        // at the level's resolution
    Mat context;          // rows (t, i, j) at the level, E columns
    Mat tpe;              // T_k x 128, time index origin.t0 + t * tau
    std::vector<int> spe_rows;  // SPE table row of each (i, j) cell
};

/// Coarsens the fused latent to `level` and gathers its positional indices.
inline LevelCondition condition_series(const Mat& c, const SampleCond& s, const ResolutionLevel& level, int city_w) {
    LevelCondition lc;
    lc.level = level;
    const int tau = level.temporal, delta = level.spatial;
    if (s.origin.t0 % tau || s.origin.i0 % delta || s.origin.j0 % delta)
        throw ShapeError("condition_series: window origin not aligned to level " + level.label);
    lc.context = coarsen_rows_mean(c, s.extent, tau, delta);
    lc.extent = Extent{s.extent.t / tau, s.extent.h / delta, s.extent.w / delta};
    lc.tpe.resize(lc.extent.t, kPeDim);
    for (int t = 0; t < lc.extent.t; ++t) {
        const auto v = tpe(s.origin.t0 + static_cast<long long>(t) * tau);
        for (int d = 0; d < kPeDim; ++d) lc.tpe(t, d) = v[d];
    }
    const int wl = city_w / delta;
    for (int i = 0; i < lc.extent.h; ++i)
        for (int j = 0; j < lc.extent.w; ++j) lc.spe_rows.push_back((s.origin.i0 / delta + i) * wl + s.origin.j0 / delta + j);
    return lc;
}

} // namespace drdm::nn
