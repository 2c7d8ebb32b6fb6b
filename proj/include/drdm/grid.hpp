#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "drdm/error.hpp"

namespace drdm {

/// One rung of a resolution ladder. `spatial` and `temporal` are integer
/// coarsening factors relative to the finest grid (cells per side, steps).
struct ResolutionLevel {
    int index = 1;
    int spatial = 1;
    int temporal = 1;
    std::string label;

    int block_cells() const { return spatial * spatial * temporal; }
    friend bool operator==(const ResolutionLevel& a, const ResolutionLevel& b) {
        return a.spatial == b.spatial && a.temporal == b.temporal;
    }
};

struct Extent {
    int t = 0;
    int h = 0;
    int w = 0;

    std::size_t size() const { return static_cast<std::size_t>(t) * h * w; }
    friend bool operator==(const Extent&, const Extent&) = default;
};

inline std::string to_string(const Extent& e) {
    return std::to_string(e.t) + "x" + std::to_string(e.h) + "x" + std::to_string(e.w);
}

/// Offset of a grid inside the finest-resolution city, in finest units.
struct Origin {
    int t0 = 0;
    int i0 = 0;
    int j0 = 0;
    friend bool operator==(const Origin&, const Origin&) = default;
};

/// A T x H x W field of traffic volumes at one resolution level. Row-major,
/// time outermost.
class Grid {
public:
    Grid() = default;
    Grid(ResolutionLevel level, Extent extent, double fill = 0.0, Origin origin = {})
        : level_(std::move(level)), extent_(extent), origin_(origin), data_(extent.size(), fill) {
        if (extent.t <= 0 || extent.h <= 0 || extent.w <= 0)
            throw ShapeError("grid extent must be positive, got " + to_string(extent));
    }
    Grid(ResolutionLevel level, Extent extent, std::vector<double> data, Origin origin = {})
        : level_(std::move(level)), extent_(extent), origin_(origin), data_(std::move(data)) {
        if (data_.size() != extent_.size())
            throw ShapeError("grid data size " + std::to_string(data_.size()) + " does not match extent " +
                             to_string(extent_));
    }

    const ResolutionLevel& level() const { return level_; }
    ResolutionLevel& level() { return level_; }
    const Extent& extent() const { return extent_; }
    const Origin& origin() const { return origin_; }
    void set_origin(Origin o) { origin_ = o; }

    int T() const { return extent_.t; }
    int H() const { return extent_.h; }
    int W() const { return extent_.w; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(int t, int i, int j) const {
        return (static_cast<std::size_t>(t) * extent_.h + i) * extent_.w + j;
    }
    double& operator()(int t, int i, int j) { return data_[index(t, i, j)]; }
    double operator()(int t, int i, int j) const { return data_[index(t, i, j)]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

private:
    ResolutionLevel level_;
    Extent extent_;
    Origin origin_;
    std::vector<double> data_;
};

inline void require_same_extent(const Grid& a, const Grid& b, const char* op) {
    if (!(a.extent() == b.extent()))
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.extent()) + " vs " +
                         to_string(b.extent()));
}

enum class CoarsenMode { sum, mean };
enum class UpsampleMode { replicate_mean, replicate_value };

/// Block-aggregate a grid by `factor_t` in time and `factor_s` in both
/// spatial axes.
inline Grid coarsen(const Grid& grid, int factor_t, int factor_s, CoarsenMode mode = CoarsenMode::sum) {
    if (factor_t < 1 || factor_s < 1) throw ShapeError("coarsen: factors must be >= 1");
    const Extent& e = grid.extent();
    if (e.t % factor_t != 0)
        throw ShapeError("coarsen: axis T (" + std::to_string(e.t) + ") not divisible by " + std::to_string(factor_t));
    if (e.h % factor_s != 0)
        throw ShapeError("coarsen: axis H (" + std::to_string(e.h) + ") not divisible by " + std::to_string(factor_s));
    if (e.w % factor_s != 0)
        throw ShapeError("coarsen: axis W (" + std::to_string(e.w) + ") not divisible by " + std::to_string(factor_s));

    ResolutionLevel lvl = grid.level();
    lvl.spatial *= factor_s;
    lvl.temporal *= factor_t;
    Extent out_e{e.t / factor_t, e.h / factor_s, e.w / factor_s};
    Grid out(lvl, out_e, 0.0, grid.origin());
    for (int t = 0; t < e.t; ++t)
        for (int i = 0; i < e.h; ++i)
            for (int j = 0; j < e.w; ++j) out(t / factor_t, i / factor_s, j / factor_s) += grid(t, i, j);
    if (mode == CoarsenMode::mean) {
        const double inv = 1.0 / (static_cast<double>(factor_t) * factor_s * factor_s);
        for (double& v : out.values()) v *= inv;
    }
    return out;
}

/// Inverse of coarsen. replicate_mean spreads each coarse value evenly over
/// its block so that coarsen(upsample(x), sum) == x.
inline Grid upsample(const Grid& grid, int factor_t, int factor_s, UpsampleMode mode = UpsampleMode::replicate_mean) {
    if (factor_t < 1 || factor_s < 1) throw ShapeError("upsample: factors must be >= 1");
    const Extent& e = grid.extent();
    ResolutionLevel lvl = grid.level();
    if (lvl.spatial % factor_s == 0 && lvl.temporal % factor_t == 0) {
        lvl.spatial /= factor_s;
        lvl.temporal /= factor_t;
    }
    Extent out_e{e.t * factor_t, e.h * factor_s, e.w * factor_s};
    const double scale = mode == UpsampleMode::replicate_mean
                             ? 1.0 / (static_cast<double>(factor_t) * factor_s * factor_s)
                             : 1.0;
    Grid out(lvl, out_e, 0.0, grid.origin());
    for (int t = 0; t < out_e.t; ++t)
        for (int i = 0; i < out_e.h; ++i)
            for (int j = 0; j < out_e.w; ++j) out(t, i, j) = grid(t / factor_t, i / factor_s, j / factor_s) * scale;
    return out;
}

/// Resample `grid` onto `target`'s resolution (target must be finer or equal).
inline Grid upsample_to(const Grid& grid, const ResolutionLevel& target, UpsampleMode mode) {
    const ResolutionLevel& src = grid.level();
    if (src.spatial % target.spatial != 0 || src.temporal % target.temporal != 0)
        throw ShapeError("upsample_to: level (" + std::to_string(src.temporal) + "," + std::to_string(src.spatial) +
                         ") is not an integer coarsening of (" + std::to_string(target.temporal) + "," +
                         std::to_string(target.spatial) + ")");
    Grid out = upsample(grid, src.temporal / target.temporal, src.spatial / target.spatial, mode);
    out.level() = target;
    return out;
}

/// Ordered K-level hierarchy, coarsest first.
struct MultiScaleTraffic {
    std::vector<Grid> levels;

    std::size_t K() const { return levels.size(); }
    const Grid& finest() const { return levels.back(); }
    const Grid& operator[](std::size_t k) const { return levels[k]; }
};

/// Checks that every adjacent pair aggregates consistently under sum.
/// Returns the worst relative discrepancy found.
inline double ladder_consistency(const MultiScaleTraffic& ladder) {
    double worst = 0.0;
    for (std::size_t k = 0; k + 1 < ladder.K(); ++k) {
        const Grid& coarse = ladder.levels[k];
        const Grid& fine = ladder.levels[k + 1];
        const int ft = coarse.level().temporal / fine.level().temporal;
        const int fs = coarse.level().spatial / fine.level().spatial;
        Grid agg = coarsen(fine, ft, fs, CoarsenMode::sum);
        require_same_extent(agg, coarse, "ladder_consistency");
        for (std::size_t i = 0; i < agg.size(); ++i) {
            const double a = agg.values()[i], b = coarse.values()[i];
            const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
            worst = std::max(worst, std::abs(a - b) / denom);
        }
    }
    return worst;
}

} // namespace drdm
