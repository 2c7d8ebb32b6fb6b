#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "drdm/bundle.hpp"
#include "drdm/error.hpp"
#include "drdm/rng.hpp"

namespace drdm::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

/// One named learnable tensor with its gradient accumulator.
struct ParamBlock {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;

    ParamBlock() = default;
    ParamBlock(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
        const auto count = static_cast<std::size_t>(std::accumulate(shape.begin(), shape.end(), 1, std::multiplies<>()));
        value.assign(count, 0.0);
        grad.assign(count, 0.0);
    }

    std::size_t size() const { return value.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : static_cast<int>(size() / shape[0]); }

    MatMap mat() { return {value.data(), rows(), cols()}; }
    CMatMap mat() const { return {value.data(), rows(), cols()}; }
    MatMap grad_mat() { return {grad.data(), rows(), cols()}; }
    VecMap vec() { return {value.data(), static_cast<Eigen::Index>(size())}; }
    CVecMap vec() const { return {value.data(), static_cast<Eigen::Index>(size())}; }
    VecMap grad_vec() { return {grad.data(), static_cast<Eigen::Index>(size())}; }

    void fill_normal(RngStream& rng, double std_dev) {
        for (auto& v : value) v = std_dev * rng.normal();
    }
    void fill(double v) { std::fill(value.begin(), value.end(), v); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using BlockList = std::vector<ParamBlock*>;

inline std::size_t parameter_count(const BlockList& blocks) {
    std::size_t n = 0;
    for (const auto* b : blocks) n += b->size();
    return n;
}

inline void zero_grad(const BlockList& blocks) {
    for (auto* b : blocks) b->zero_grad();
}

inline double grad_norm(const BlockList& blocks) {
    double s = 0.0;
    for (const auto* b : blocks)
        for (double g : b->grad) s += g * g;
    return std::sqrt(s);
}

/// Plain SGD with heavy-ball momentum and optional global-norm clipping.
class Sgd {
public:
    double lr = 1e-3;
    double momentum = 0.9;
    double clip = 0.0;

    void step(const BlockList& blocks) {
        if (velocity_.size() != blocks.size()) {
            velocity_.clear();
            for (const auto* b : blocks) velocity_.emplace_back(b->size(), 0.0);
        }
        double scale = 1.0;
        if (clip > 0.0) {
            const double norm = grad_norm(blocks);
            if (norm > clip) scale = clip / norm;
        }
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& b = *blocks[i];
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < b.size(); ++j) {
                v[j] = momentum * v[j] + scale * b.grad[j];
                b.value[j] -= lr * v[j];
            }
        }
    }

    const std::vector<std::vector<double>>& velocity() const { return velocity_; }
    std::vector<std::vector<double>>& velocity() { return velocity_; }

private:
    std::vector<std::vector<double>> velocity_;
};

/// Adam with bias correction and optional global-norm clipping.
class Adam {
public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 0.0;

    void step(const BlockList& blocks) {
        if (m_.size() != blocks.size()) {
            m_.clear();
            v_.clear();
            for (const auto* b : blocks) {
                m_.emplace_back(b->size(), 0.0);
                v_.emplace_back(b->size(), 0.0);
            }
            t_ = 0;
        }
        double scale = 1.0;
        if (clip > 0.0) {
            const double norm = grad_norm(blocks);
            if (norm > clip) scale = clip / norm;
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, t_), c2 = 1.0 - std::pow(beta2, t_);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& b = *blocks[i];
            for (std::size_t j = 0; j < b.size(); ++j) {
                const double g = scale * b.grad[j];
                m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g;
                v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g * g;
                b.value[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps);
            }
        }
    }

    long steps() const { return t_; }

private:
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

inline void blocks_to_bundle(const BlockList& blocks, TensorBundle& bundle, const std::string& prefix = "param/") {
    for (const auto* b : blocks) {
        std::vector<std::int64_t> shape(b->shape.begin(), b->shape.end());
        bundle.add(prefix + b->name, shape, b->value);
    }
}

/// Loads every block by name; shapes must agree.
inline void blocks_from_bundle(const BlockList& blocks, const TensorBundle& bundle, const std::string& prefix = "param/") {
    for (auto* b : blocks) {
        const auto& e = bundle.get(prefix + b->name);
        if (e.values.size() != b->size())
            throw ShapeError("checkpoint: block '" + b->name + "' has " + std::to_string(e.values.size()) +
                             " values, expected " + std::to_string(b->size()));
        b->value.assign(e.values.begin(), e.values.end());
    }
}

/// Rounds every parameter to f32 so in-memory state equals its checkpoint.
inline void quantize(const BlockList& blocks) {
    for (auto* b : blocks)
        for (auto& v : b->value) v = static_cast<double>(static_cast<float>(v));
}

} // namespace drdm::nn
