#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "drdm/guidance.hpp"

using namespace drdm;

namespace {

std::vector<double> randn(RngStream& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

// Output projection zeroed: the fusion reduces to e + s p.
FusionParams bypass(int d, PriorSign sign) { return FusionParams(d, sign, RngStream(0, "fusion-test")); }

} // namespace

TEST(PriorNoise, StageOneIsZero) {
    Grid coarse(ResolutionLevel{1, 2, 1, "c"}, {1, 1, 1}, 5.0);
    const auto p = prior_noise(coarse, 0.3, 1, ResolutionLevel{2, 1, 1, "f"});
    EXPECT_EQ(p.source_level, 0);
    for (double v : p.tensor.values()) EXPECT_EQ(v, 0.0);
}

TEST(PriorNoise, UnitRatio) {
    Grid coarse(ResolutionLevel{1, 1, 1, "c"}, {2, 2, 2}, 1.0);
    const auto p = prior_noise(coarse, 0.5, 2, ResolutionLevel{2, 1, 1, "f"});
    for (double v : p.tensor.values()) EXPECT_NEAR(v, 1.0, 1e-15);
    EXPECT_EQ(p.alpha_used, 0.5);
}

TEST(PriorNoise, ScalarArithmetic) {
    Grid coarse(ResolutionLevel{1, 2, 1, "c"}, {1, 1, 1}, 4.0);
    const auto p = prior_noise(coarse, 0.8, 2, ResolutionLevel{2, 1, 1, "f"});
    ASSERT_EQ(p.tensor.extent(), (Extent{1, 2, 2}));
    for (double v : p.tensor.values()) EXPECT_NEAR(v, 2.0, 1e-12);
}

TEST(PriorNoise, Errors) {
    Grid coarse(ResolutionLevel{1, 2, 1, "c"}, {1, 1, 1}, 4.0);
    EXPECT_THROW(prior_noise(coarse, 1.0, 2, ResolutionLevel{2, 1, 1, "f"}), ScheduleError);
    EXPECT_THROW(prior_noise(coarse, 0.0, 2, ResolutionLevel{2, 1, 1, "f"}), ScheduleError);
    EXPECT_THROW(prior_noise(coarse, 0.5, 2, ResolutionLevel{2, 3, 1, "f"}), ShapeError);
}

TEST(PriorNoise, Homogeneous) {
    RngStream rng(21, "hom");
    Grid x(ResolutionLevel{1, 2, 2, "c"}, {2, 2, 2});
    for (double& v : x.values()) v = rng.normal();
    for (double c : {-2.0, 0.5, 3.0}) {
        Grid cx = x;
        for (double& v : cx.values()) v *= c;
        const auto a = prior_noise(cx, 0.37, 3, ResolutionLevel{3, 1, 1, "f"});
        const auto b = prior_noise(x, 0.37, 3, ResolutionLevel{3, 1, 1, "f"});
        for (std::size_t i = 0; i < a.tensor.size(); ++i)
            EXPECT_NEAR(a.tensor.values()[i], c * b.tensor.values()[i], 1e-12);
    }
}

TEST(PriorNoise, RatioMonotone) {
    double prev = 0.0;
    for (int i = 1; i < 1000; ++i) {
        const double r = prior_ratio(i / 1000.0);
        EXPECT_GT(r, prev);
        prev = r;
    }
}

TEST(ResidualDecompose, NoPrior) {
    RngStream rng(22, "rd");
    const auto x0 = randn(rng, 10), eps = randn(rng, 10);
    const auto r = residual_decompose(x0, std::vector<double>(10, 0.0), 0.4, eps);
    EXPECT_EQ(r.delta_eps, eps);
    EXPECT_EQ(r.delta_x0, x0);
}

TEST(ResidualDecompose, PurePrior) {
    RngStream rng(23, "rd");
    const auto h = randn(rng, 10), eps = randn(rng, 10);
    const double a = 0.65;
    const auto r = residual_decompose(h, h, a, eps);
    for (std::size_t i = 0; i < h.size(); ++i) {
        EXPECT_EQ(r.delta_x0[i], 0.0);
        const double lhs = std::sqrt(a) * (h[i] + r.delta_x0[i]) + std::sqrt(1 - a) * eps[i];
        EXPECT_NEAR(lhs, std::sqrt(a) * h[i] + std::sqrt(1 - a) * eps[i], 1e-15);
    }
}

TEST(ResidualDecompose, BothFormsAgree) {
    RngStream rng(24, "rd");
    for (int rep = 0; rep < 50; ++rep) {
        const auto x0 = randn(rng, 12), h = randn(rng, 12), eps = randn(rng, 12);
        const double a = rng.uniform(0.01, 0.99);
        const auto r = residual_decompose(x0, h, a, eps);
        for (std::size_t i = 0; i < x0.size(); ++i) {
            // x = sqrt(a) x0 + sqrt(1-a) eps  vs  sqrt(a) dx0 + sqrt(1-a) d_eps.
            const double direct = std::sqrt(a) * x0[i] + std::sqrt(1 - a) * eps[i];
            const double residual = std::sqrt(a) * r.delta_x0[i] + std::sqrt(1 - a) * r.delta_eps[i];
            EXPECT_NEAR(direct, residual, 1e-9 * std::max(1.0, std::abs(direct)));
            EXPECT_NEAR(r.delta_eps[i] - r.hat_eps[i], eps[i], 1e-9 * std::max(1.0, std::abs(eps[i])));
        }
    }
}

TEST(ResidualDecompose, ShapeMismatch) {
    EXPECT_THROW(residual_decompose({1, 2}, {1}, 0.5, {1, 2}), ShapeError);
}

TEST(FuseNoise, IdentityBypassPlus) {
    RngStream rng(25, "fuse");
    const auto e = randn(rng, 20), p = randn(rng, 20);
    const auto f = bypass(32, PriorSign::plus);
    const auto out = fuse_noise(e, p, f);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(out[i], e[i] + p[i]);
}

TEST(FuseNoise, IdentityBypassMinus) {
    RngStream rng(26, "fuse");
    const auto e = randn(rng, 20), p = randn(rng, 20);
    const auto out = fuse_noise(e, p, bypass(8, PriorSign::minus));
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(out[i], e[i] - p[i]);
}

TEST(FuseNoise, ZeroPriorPassesThrough) {
    RngStream rng(27, "fuse");
    const auto e = randn(rng, 20);
    for (auto sign : {PriorSign::plus, PriorSign::minus}) EXPECT_EQ(fuse_noise(e, std::vector<double>(20, 0.0), bypass(4, sign)), e);
}

TEST(FuseNoise, GridOverloadAndShapes) {
    Grid eps(ResolutionLevel{}, {1, 2, 2}, 0.25);
    Grid coarse(ResolutionLevel{1, 2, 1, "c"}, {1, 1, 1}, 4.0);
    const auto prior = prior_noise(coarse, 0.8, 2, ResolutionLevel{});
    const auto out = fuse_noise(eps, prior, bypass(3, PriorSign::plus));
    for (double v : out.values()) EXPECT_NEAR(v, 2.25, 1e-12);
    EXPECT_THROW(fuse_noise(std::vector<double>{1, 2}, std::vector<double>{1}, bypass(1, PriorSign::plus)), ShapeError);
    EXPECT_THROW(FusionParams(0, PriorSign::plus, RngStream(0, "x")), ConfigError);
}

TEST(FuseNoise, LatentPathwayShapesAndGradient) {
    auto f = bypass(5, PriorSign::minus);
    EXPECT_EQ(f.noise_in.size(), 10u);
    EXPECT_EQ(f.prior_in.size(), 10u);
    EXPECT_EQ(f.out.size(), 11u);
    RngStream rng(28, "fg");
    for (auto* b : f.blocks())
        for (double& v : b->value) v = rng.normal();
    const double e = 0.3, p = -0.7, h = 1e-6;
    nn::zero_grad(f.blocks());
    const double de = f.backward(e, p, 1.0);
    EXPECT_NEAR(de, (f.apply(e + h, p) - f.apply(e - h, p)) / (2 * h), 1e-8);
    for (auto* b : f.blocks())
        for (std::size_t j = 0; j < b->size(); ++j) {
            const double keep = b->value[j];
            b->value[j] = keep + h;
            const double up = f.apply(e, p);
            b->value[j] = keep - h;
            const double dn = f.apply(e, p);
            b->value[j] = keep;
            EXPECT_NEAR(b->grad[j], (up - dn) / (2 * h), 1e-8) << b->name << "[" << j << "]";
        }
}

TEST(PriorSign, Parse) {
    EXPECT_EQ(parse_prior_sign("plus"), PriorSign::plus);
    EXPECT_EQ(parse_prior_sign("minus"), PriorSign::minus);
    EXPECT_THROW(parse_prior_sign("times"), ConfigError);
}
