#include <cmath>
#include <map>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "drdm/rng.hpp"
#include "drdm/city.hpp"
#include "drdm/schedule.hpp"

using namespace drdm;

namespace {

RGPPlan s3t4(Strategy s = Strategy::fine_greedy) { return plan_rgp({4, 2, 1}, {24, 4, 2, 1}, 600, s); }

ScheduleSpec spec_of(Intensity i, Adding a = Adding::SA, Denoising d = Denoising::SD) {
    ScheduleSpec s;
    s.intensity = i;
    s.adding = a;
    s.denoising = d;
    return s;
}

// Independent scalar oracle: the scheduled noise strength straight from the interval table.
double beta_oracle(const std::vector<int>& bounds, int N, Intensity mode, int n) {
    if (mode == Intensity::CN) return double(n) / N;
    int hi = N;
    for (int b : bounds) {
        if (n >= b) return double(n - b) / (hi - b);
        hi = b;
    }
    return 0.0;
}

RGPPlan random_plan(RngStream& rng) {
    const int ns = 1 + rng.uniform_int(0, 4), nt = 1 + rng.uniform_int(0, 4);
    std::vector<int> sp, tp;
    for (int i = ns - 1; i >= 0; --i) sp.push_back(1 << i);
    for (int i = nt - 1; i >= 0; --i) tp.push_back(1 << i);
    if (ns == 1 && nt == 1) sp = {2, 1};
    const int N = 20 + rng.uniform_int(0, 600);
    return plan_rgp(sp, tp, N, static_cast<Strategy>(rng.uniform_int(0, 3)));
}

} // namespace

TEST(PlanRgp, S3T4FineGreedy) {
    const auto p = s3t4();
    EXPECT_EQ(p.K(), 4);
    EXPECT_EQ(p.interior(), (std::vector<int>{450, 300, 150}));
    const std::vector<std::pair<int, int>> expect = {{24, 4}, {4, 2}, {2, 1}, {1, 1}};  // (tau, delta)
    for (int k = 1; k <= 4; ++k) {
        EXPECT_EQ(p.level(k).temporal, expect[k - 1].first) << k;
        EXPECT_EQ(p.level(k).spatial, expect[k - 1].second) << k;
    }
}

TEST(PlanRgp, SingleLevelRejected) {
    EXPECT_THROW(plan_rgp({1}, {1}, 100, Strategy::uniform), ScheduleError);
    EXPECT_THROW(plan_rgp({1}, {1}, 100, Strategy::fine_greedy), ScheduleError);
}

TEST(PlanRgp, S2T2UniformEvenSplit) {
    const auto p = plan_rgp({2, 1}, {2, 1}, 100, Strategy::uniform);
    EXPECT_EQ(p.interior(), (std::vector<int>{50}));
    EXPECT_EQ(p.steps(1), 50);
    EXPECT_EQ(p.steps(2), 50);
}

TEST(PlanRgp, UniformS3T2HasFourStages) {
    const auto p = plan_rgp({4, 2, 1}, {2, 1}, 300, Strategy::uniform);
    EXPECT_EQ(p.K(), 4);
    EXPECT_EQ(p.interior(), (std::vector<int>{200, 150, 100}));
    EXPECT_EQ(p.level(1).spatial, 4);
    EXPECT_EQ(p.level(1).temporal, 2);
    EXPECT_EQ(p.level(4).spatial, 1);
    EXPECT_EQ(p.level(4).temporal, 1);
}

TEST(PlanRgp, CoarseGreedyPinsShortListLate) {
    const auto p = plan_rgp({4, 2, 1}, {2, 1}, 300, Strategy::coarse_greedy);
    EXPECT_EQ(p.level(1).temporal, 2);
    EXPECT_EQ(p.level(2).temporal, 2);
    EXPECT_EQ(p.level(3).temporal, 1);
    const auto f = plan_rgp({4, 2, 1}, {2, 1}, 300, Strategy::fine_greedy);
    EXPECT_EQ(f.level(2).temporal, 1);
}

TEST(PlanRgp, TooSmallN) { EXPECT_THROW(plan_rgp({4, 2, 1}, {2, 1}, 5, Strategy::fine_greedy), ScheduleError); }

TEST(PlanRgp, GreedyStrategiesShareBoundariesForEqualCounts) {
    const auto f = plan_rgp({4, 2, 1}, {4, 2, 1}, 90, Strategy::fine_greedy);
    const auto c = plan_rgp({4, 2, 1}, {4, 2, 1}, 90, Strategy::coarse_greedy);
    EXPECT_EQ(f.K(), c.K());
    EXPECT_EQ(f.boundaries, c.boundaries);
}

TEST(NoiseLevel, Examples) {
    const auto p = s3t4();
    const auto cn = spec_of(Intensity::CN), sn = spec_of(Intensity::SN);
    EXPECT_EQ(alpha(p, cn, 0), 1.0);
    EXPECT_DOUBLE_EQ(noise_level(p, cn, 300), 0.5);
    EXPECT_DOUBLE_EQ(alpha(p, cn, 300), 0.5);
    EXPECT_EQ(noise_level(p, sn, 450), 0.0);
    EXPECT_EQ(alpha(p, sn, 450), 1.0);
    EXPECT_EQ(noise_level(p, cn, 600), 1.0);
    EXPECT_EQ(alpha(p, cn, 600), 0.0);
    EXPECT_EQ(alpha(p, cn, 599), 1.0 - 599.0 / 600.0);
    EXPECT_THROW(noise_level(p, cn, 601), ScheduleError);
    EXPECT_THROW(noise_level(p, cn, -1), ScheduleError);
}

TEST(NoiseLevel, InteriorClamp) {
    auto p = make_plan(10, {5}, {ResolutionLevel{1, 2, 1, ""}, ResolutionLevel{2, 1, 1, ""}});
    ScheduleSpec s = spec_of(Intensity::SN);
    s.alpha_min = 0.3;
    s.alpha_max = 0.7;
    EXPECT_EQ(alpha_local(p, s, 2, 1), 0.7);
    EXPECT_EQ(alpha_local(p, s, 2, 4), 0.3);
    EXPECT_EQ(alpha_local(p, s, 2, 0), 1.0);
    EXPECT_EQ(alpha_local(p, s, 2, 5), 0.0);
    EXPECT_EQ(alpha_clamped(p, s, 2, 0), 0.7);
}

TEST(NoiseLevel, RandomPlansAgainstOracle) {
    RngStream rng(11, "plans");
    for (int r = 0; r < 10; ++r) {
        const auto p = random_plan(rng);
        for (auto mode : {Intensity::CN, Intensity::SN}) {
            const auto s = spec_of(mode);
            double prev = -1.0;
            for (int n = 0; n <= p.N; ++n) {
                const double b = noise_level(p, s, n);
                EXPECT_EQ(b, beta_oracle(p.boundaries, p.N, mode, n)) << n;
                EXPECT_GE(b, 0.0);
                EXPECT_LE(b, 1.0);
                if (mode == Intensity::CN) EXPECT_GE(b, prev);
                prev = b;
            }
            for (int k = 1; k <= p.K(); ++k) {
                if (mode == Intensity::CN) EXPECT_EQ(beta_local(p, s, k, p.steps(k)), double(p.upper(k)) / p.N);
                if (mode == Intensity::SN) {
                    EXPECT_EQ(beta_local(p, s, k, 0), 0.0);
                    EXPECT_EQ(beta_local(p, s, k, p.steps(k)), 1.0);
                    for (int m = 1; m <= p.steps(k); ++m) EXPECT_GE(beta_local(p, s, k, m), beta_local(p, s, k, m - 1));
                }
            }
        }
    }
}

TEST(StageOf, FrozenIntervalTable) {
    const auto p = s3t4();
    const std::map<int, int> table = {{0, 4},   {149, 4}, {150, 3}, {299, 3}, {300, 2},
                                      {449, 2}, {450, 1}, {599, 1}};
    for (auto [n, k] : table) EXPECT_EQ(stage_of(p, n), k) << n;
    EXPECT_THROW(stage_of(p, 600), ScheduleError);
    EXPECT_THROW(stage_of(p, -1), ScheduleError);
}

TEST(StageOf, TilesRange) {
    RngStream rng(12, "tile");
    for (int r = 0; r < 10; ++r) {
        const auto p = random_plan(rng);
        std::vector<int> count(p.K() + 1, 0);
        for (int n = 0; n < p.N; ++n) {
            const int k = stage_of(p, n);
            EXPECT_GE(n, p.lower(k));
            EXPECT_LT(n, p.upper(k));
            ++count[k];
        }
        for (int k = 1; k <= p.K(); ++k) {
            EXPECT_EQ(count[k], p.steps(k));
            EXPECT_EQ(stage_of(p, p.lower(k)), k);
        }
    }
}

TEST(Sigma, TerminalStepIsZero) {
    const auto p = s3t4();
    for (auto mode : {Intensity::CN, Intensity::SN})
        for (auto form : {SigmaForm::mixed, SigmaForm::ddpm_posterior}) {
            auto s = spec_of(mode);
            s.sigma_form = form;
            for (int k = 1; k <= p.K(); ++k) EXPECT_EQ(sigma_local(p, s, k, 1), 0.0);
        }
    EXPECT_THROW(sigma(p, spec_of(Intensity::SN), 450), ScheduleError);
}

TEST(Sigma, ScalarOracle) {
    // CN, N = 2, n = 1 is a terminal step.
    const auto p2 = make_plan(2, {}, {ResolutionLevel{}});
    EXPECT_EQ(sigma(p2, spec_of(Intensity::CN), 1), 0.0);
    // CN, N = 2, n = 2: a_2 clamped to 1e-4, a_1 = 0.5, ah_1 = 0.5.
    const double a2 = 1e-4, a1 = 0.5, ah1 = 0.5;
    EXPECT_NEAR(sigma(p2, spec_of(Intensity::CN), 2), std::sqrt(1 - ah1) * (1 - a1) / (1 - a2), 1e-15);

    // Flat segment: both alphas clamped to the same floor.
    const auto p = make_plan(10, {}, {ResolutionLevel{}});
    ScheduleSpec s = spec_of(Intensity::CN);
    s.alpha_min = 0.5;
    const double am = 0.5, ap = 0.5, ahp = 0.5 / 0.6;
    EXPECT_NEAR(sigma(p, s, 6), std::sqrt(1 - ahp) * (1 - ap) / (1 - am), 1e-15);
    s.sigma_form = SigmaForm::ddpm_posterior;
    EXPECT_NEAR(sigma(p, s, 6), 0.0, 1e-15);
    s.sigma_off = true;
    EXPECT_EQ(sigma(p, s, 8), 0.0);
}

TEST(NoisingStart, Modes) {
    Grid fine(ResolutionLevel{}, {4, 4, 4});
    RngStream rng(13, "ns");
    for (double& v : fine.values()) v = rng.uniform();
    const auto plan = plan_rgp({2, 1}, {2, 1}, 20, Strategy::fine_greedy);
    std::vector<ResolutionLevel> lv = plan.stages;
    const auto ladder = build_ladder(fine, lv);
    const auto sa = spec_of(Intensity::SN, Adding::SA), ca = spec_of(Intensity::SN, Adding::CA);
    EXPECT_EQ(noising_start(plan, sa, 1, ladder).storage(), ladder.levels[0].storage());
    EXPECT_EQ(noising_start(plan, ca, 2, ladder).storage(), fine.storage());

    Grid ones(ResolutionLevel{}, {4, 4, 4}, 1.0);
    const auto ones_ladder = build_ladder(ones, lv);
    const Grid start = noising_start(plan, ca, 1, ones_ladder);
    for (double v : start.values()) EXPECT_EQ(v, 1.0);

    MultiScaleTraffic missing;
    missing.levels = {ladder.levels[1]};
    EXPECT_THROW(noising_start(plan, sa, 1, missing), ScheduleError);
}

TEST(ScheduleSpec, Validates) {
    ScheduleSpec s;
    s.alpha_min = 0.9;
    s.alpha_max = 0.5;
    EXPECT_THROW(s.validate(), ConfigError);
    EXPECT_EQ(ScheduleSpec{}.label(), "[SN,SA,SD]");
}
