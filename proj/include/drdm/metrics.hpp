#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "drdm/grid.hpp"

namespace drdm {

inline double mae(const Grid& pred, const Grid& truth) {
    require_same_extent(pred, truth, "mae");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred.values()[i] - truth.values()[i]);
    return acc / static_cast<double>(pred.size());
}

inline double mse(const Grid& pred, const Grid& truth) {
    require_same_extent(pred, truth, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.values()[i] - truth.values()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

inline double rmse(const Grid& pred, const Grid& truth) { return std::sqrt(mse(pred, truth)); }

/// Per-cell time average, as an H x W grid with a single time step.
inline Grid time_mean(const Grid& g) {
    Grid out(g.level(), Extent{1, g.H(), g.W()}, 0.0, g.origin());
    for (int t = 0; t < g.T(); ++t)
        for (int i = 0; i < g.H(); ++i)
            for (int j = 0; j < g.W(); ++j) out(0, i, j) += g(t, i, j);
    for (double& v : out.values()) v /= g.T();
    return out;
}

/// RMSE between the time-averaged spatial maps.
inline double sp_rmse(const Grid& pred, const Grid& truth) {
    require_same_extent(pred, truth, "sp_rmse");
    return rmse(time_mean(pred), time_mean(truth));
}

/// PSNR in dB with peak `peak`. Identical inputs give +infinity.
inline double psnr(const Grid& pred, const Grid& truth, double peak) {
    if (!(peak > 0.0)) throw ShapeError("psnr: peak must be positive");
    const double m = mse(pred, truth);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / m);
}

/// RV coefficient between two data matrices sharing their row count.
///
/// Evaluated through the cross-products: tr(A A' B B') = |A'B|_F^2 and
/// tr((A A')^2) = |A'A|_F^2, which avoids forming the n x n Gram matrices.
inline double rv_coefficient(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows())
        throw ShapeError("rv_coefficient: row counts differ (" + std::to_string(a.rows()) + " vs " +
                         std::to_string(b.rows()) + ")");
    const double saa = (a.transpose() * a).squaredNorm();
    const double sbb = (b.transpose() * b).squaredNorm();
    if (saa == 0.0 || sbb == 0.0) throw UndefinedCoefficientError("rv_coefficient: zero Gram matrix");
    const double sab = (a.transpose() * b).squaredNorm();
    return sab / std::sqrt(saa * sbb);
}

/// Rows = time steps of `g` (after averaging down to `temporal` if coarser is
/// requested), columns = cells of `g` inside the finest-unit rectangle
/// [i0, i1) x [j0, j1). Columns are centred on their time mean.
inline Eigen::MatrixXd level_matrix(const Grid& g, int temporal, int i0, int i1, int j0, int j1) {
    const int ft = temporal / g.level().temporal;
    if (ft < 1 || temporal % g.level().temporal != 0) throw ShapeError("level_matrix: incompatible temporal factor");
    Grid gt = ft > 1 ? coarsen(g, ft, 1, CoarsenMode::mean) : g;
    const int s = g.level().spatial;
    std::vector<std::pair<int, int>> cells;
    for (int i = i0 / s; i < (i1 + s - 1) / s; ++i)
        for (int j = j0 / s; j < (j1 + s - 1) / s; ++j) cells.emplace_back(i, j);
    Eigen::MatrixXd m(gt.T(), static_cast<Eigen::Index>(cells.size()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        for (int t = 0; t < gt.T(); ++t) m(t, c) = gt(t, cells[c].first, cells[c].second);
        m.col(c).array() -= m.col(c).mean();
    }
    return m;
}

} // namespace drdm
