#pragma once

#include <cmath>
#include <string>

#include "drdm/nn/param.hpp"

namespace drdm::nn {

/// Spatial layout of a channel-last activation: rows are (b, i, j) with the
/// folded time axis as b, columns are channels.
struct Layout {
    int B = 1, H = 1, W = 1;
    int rows() const { return B * H * W; }
};

/// y = x W + b, x has one sample per row.
struct Linear {
    ParamBlock w;  // in x out
    ParamBlock b;  // out
    bool has_bias = true;

    Linear() = default;
    Linear(const std::string& name, int in, int out, bool bias = true)
        : w(name + ".w", {in, out}), b(name + ".b", {bias ? out : 0}), has_bias(bias) {}

    int in() const { return w.rows(); }
    int out() const { return w.cols(); }

    void init(RngStream rng, double gain = 2.0) { w.fill_normal(rng, std::sqrt(gain / in())); }

    Mat forward(const Mat& x) const {
        Mat y = x * w.mat();
        if (has_bias) y.rowwise() += b.vec().transpose();
        return y;
    }
    /// Accumulates parameter gradients, returns dL/dx.
    Mat backward(const Mat& x, const Mat& dy) {
        w.grad_mat().noalias() += x.transpose() * dy;
        if (has_bias) b.grad_vec() += dy.colwise().sum().transpose();
        return dy * w.mat().transpose();
    }
    void blocks(BlockList& out) {
        out.push_back(&w);
        if (has_bias) out.push_back(&b);
    }
};

/// Two-layer perceptron: Linear -> ReLU -> Linear.
struct Mlp {
    Linear l1, l2;

    Mlp() = default;
    Mlp(const std::string& name, int in, int hidden, int out) : l1(name + ".l1", in, hidden), l2(name + ".l2", hidden, out) {}

    struct Cache {
        Mat x, pre, act;
    };

    void init(RngStream rng) {
        l1.init(rng.child(1));
        l2.init(rng.child(2), 1.0);
    }

    Mat forward(const Mat& x, Cache* cache) const {
        Mat pre = l1.forward(x);
        Mat act = pre.cwiseMax(0.0);
        Mat y = l2.forward(act);
        if (cache) *cache = {x, std::move(pre), std::move(act)};
        return y;
    }
    Mat backward(const Cache& c, const Mat& dy) {
        Mat dact = l2.backward(c.act, dy);
        dact = (c.pre.array() > 0.0).select(dact, 0.0);
        return l1.backward(c.x, dact);
    }
    void blocks(BlockList& out) {
        l1.blocks(out);
        l2.blocks(out);
    }
};

inline Mat relu(const Mat& x) { return x.cwiseMax(0.0); }
inline Mat relu_backward(const Mat& pre, const Mat& dy) { return (pre.array() > 0.0).select(dy, 0.0); }

/// 3x3 same-padded convolution over (i, j), independent per b.
struct Conv3x3 {
    ParamBlock w;  // (9 cin) x cout, row index (ky * 3 + kx) * cin + c
    ParamBlock b;  // cout
    int cin = 0, cout = 0;

    Conv3x3() = default;
    Conv3x3(const std::string& name, int in, int out)
        : w(name + ".w", {9 * in, out}), b(name + ".b", {out}), cin(in), cout(out) {}

    void init(RngStream rng, double gain = 2.0) { w.fill_normal(rng, std::sqrt(gain / (9.0 * cin))); }

    static Mat im2col(const Mat& x, const Layout& l, int cin) {
        Mat cols = Mat::Zero(l.rows(), 9 * cin);
        for (int bb = 0; bb < l.B; ++bb)
            for (int i = 0; i < l.H; ++i)
                for (int j = 0; j < l.W; ++j) {
                    const int r = (bb * l.H + i) * l.W + j;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int ii = i + ky - 1;
                        if (ii < 0 || ii >= l.H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int jj = j + kx - 1;
                            if (jj < 0 || jj >= l.W) continue;
                            cols.block(r, (ky * 3 + kx) * cin, 1, cin) = x.row((bb * l.H + ii) * l.W + jj);
                        }
                    }
                }
        return cols;
    }

    static Mat col2im(const Mat& dcols, const Layout& l, int cin) {
        Mat dx = Mat::Zero(l.rows(), cin);
        for (int bb = 0; bb < l.B; ++bb)
            for (int i = 0; i < l.H; ++i)
                for (int j = 0; j < l.W; ++j) {
                    const int r = (bb * l.H + i) * l.W + j;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int ii = i + ky - 1;
                        if (ii < 0 || ii >= l.H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int jj = j + kx - 1;
                            if (jj < 0 || jj >= l.W) continue;
                            dx.row((bb * l.H + ii) * l.W + jj) += dcols.block(r, (ky * 3 + kx) * cin, 1, cin);
                        }
                    }
                }
        return dx;
    }

    Mat forward(const Mat& x, const Layout& l, Mat* cols_cache) const {
        Mat cols = im2col(x, l, cin);
        Mat y = cols * w.mat();
        y.rowwise() += b.vec().transpose();
        if (cols_cache) *cols_cache = std::move(cols);
        return y;
    }

    Mat backward(const Mat& cols, const Mat& dy, const Layout& l) {
        w.grad_mat().noalias() += cols.transpose() * dy;
        b.grad_vec() += dy.colwise().sum().transpose();
        return col2im(dy * w.mat().transpose(), l, cin);
    }

    void blocks(BlockList& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

} // namespace drdm::nn
