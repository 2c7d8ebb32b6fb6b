#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "drdm/engine.hpp"
#include "drdm/gradcheck.hpp"

using namespace drdm;

namespace {

const Extent kFine{4, 8, 8};

RGPPlan small_plan(int N = 12) { return plan_rgp({2, 1}, {2, 1}, N, Strategy::fine_greedy); }

ScheduleSpec spec_of(Intensity i, Adding a, Denoising d) {
    ScheduleSpec s;
    s.intensity = i;
    s.adding = a;
    s.denoising = d;
    return s;
}

std::vector<ScheduleSpec> all_combos() {
    std::vector<ScheduleSpec> out;
    for (auto i : {Intensity::CN, Intensity::SN})
        for (auto a : {Adding::CA, Adding::SA})
            for (auto d : {Denoising::CD, Denoising::SD}) out.push_back(spec_of(i, a, d));
    return out;
}

Grid random_fine(std::uint64_t seed) {
    RngStream rng(seed, "fine");
    Grid g(ResolutionLevel{}, kFine);
    for (double& v : g.values()) v = rng.uniform(0.0, 5.0);
    return g;
}

nn::DenoiserConfig small_net_config() {
    nn::DenoiserConfig c;
    c.latent = 6;
    c.hidden = 6;
    c.channels = 5;
    c.poi_dim = 3;
    c.city_h = 8;
    c.city_w = 8;
    c.spatial_levels = {2, 1};
    c.fusion_dim = 4;
    return c;
}

nn::SampleCond cond_fixture() { return gradcheck_fixture(kFine, RngStream(3, "engine-cond")); }

// Exact noise for the true level: x = sqrt(a) z0 + sqrt(1 - a) eps solved for eps.
Predictor oracle(const MultiScaleTraffic& truth, const Normalizer& norm) {
    return [&truth, norm](const StepQuery& q) {
        const auto z0 = norm.to_z(level_grid(truth, *q.level));
        std::vector<double> eps(z0.size());
        for (std::size_t i = 0; i < eps.size(); ++i)
            eps[i] = ((*q.x)[i] - std::sqrt(q.alpha) * z0[i]) / std::sqrt(1.0 - q.alpha);
        return eps;
    };
}

double max_rel_diff(const Grid& a, const Grid& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]) / std::max(1.0, std::abs(b.values()[i])));
    return m;
}

} // namespace

TEST(Normalizer, RoundTrip) {
    const Normalizer norm{4.0};
    const auto fine = random_fine(1);
    const auto lad = stage_ladder(fine, small_plan());
    const Grid& coarse = lad.levels[0];
    const auto z = norm.to_z(coarse);
    EXPECT_NEAR(z[0], 2.0 * coarse.values()[0] / (8 * 4.0), 1e-15);
    const auto back = norm.to_raw(z, coarse.level(), coarse.extent());
    EXPECT_LE(max_rel_diff(back, coarse), 1e-14);
}

TEST(HnapForward, BoundaryIsTheLevel) {
    const auto plan = small_plan();
    const Normalizer norm{5.0};
    const auto lad = stage_ladder(random_fine(2), plan);
    RngStream rng(4, "eps");
    const auto sn = spec_of(Intensity::SN, Adding::SA, Denoising::SD);
    const auto s = hnap_forward(lad, plan, sn, norm, plan.lower(1), normals(rng, 32));
    EXPECT_EQ(s.k, 1);
    EXPECT_EQ(s.m, 0);
    EXPECT_EQ(s.alpha, 1.0);
    EXPECT_EQ(s.x, norm.to_z(lad.levels[0]));
    const auto fine = hnap_forward(lad, plan, sn, norm, 0, normals(rng, kFine.size()));
    EXPECT_EQ(fine.x, norm.to_z(lad.levels[1]));
}

TEST(HnapForward, FullNoiseIsEps) {
    const auto plan = small_plan();
    const auto lad = stage_ladder(random_fine(3), plan);
    RngStream rng(5, "eps");
    const auto eps = normals(rng, 32);
    for (auto i : {Intensity::CN, Intensity::SN}) {
        const auto s = hnap_forward(lad, plan, spec_of(i, Adding::SA, Denoising::SD), Normalizer{5.0}, plan.N, eps);
        EXPECT_EQ(s.alpha, 0.0);
        for (std::size_t j = 0; j < eps.size(); ++j) EXPECT_NEAR(s.x[j], eps[j], 1e-15);
    }
}

TEST(HnapForward, HalfAlphaZeroStart) {
    const auto plan = plan_rgp({2, 1}, {2, 1}, 600, Strategy::fine_greedy);
    const auto lad = stage_ladder(Grid(ResolutionLevel{}, kFine, 0.0), plan);
    RngStream rng(6, "eps");
    const auto eps = normals(rng, 32);
    const auto s = hnap_forward(lad, plan, spec_of(Intensity::CN, Adding::SA, Denoising::SD), Normalizer{}, 300, eps);
    EXPECT_DOUBLE_EQ(s.alpha, 0.5);
    for (std::size_t j = 0; j < eps.size(); ++j) EXPECT_NEAR(s.x[j], std::sqrt(0.5) * eps[j], 1e-15);
    EXPECT_THROW(hnap_forward(lad, plan, spec_of(Intensity::CN, Adding::SA, Denoising::SD), Normalizer{}, 300,
                              normals(rng, 3)),
                 ShapeError);
}

TEST(Loss, OracleIsZero) {
    RngStream rng(7, "loss");
    const auto eps = normals(rng, 20), prior = normals(rng, 20);
    EXPECT_EQ(prior_loss(eps, prior, eps, nullptr, nullptr), 0.0);
    FusionParams f(4, PriorSign::minus, RngStream(0, "f"));
    std::vector<double> shifted(20), d;
    for (int i = 0; i < 20; ++i) shifted[i] = eps[i] + prior[i];
    EXPECT_NEAR(prior_loss(shifted, prior, eps, &f, &d), 0.0, 1e-28);
    for (double g : d) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Loss, SingleStageReducesToCanonical) {
    // One stage with CN intensity: the forward draw and the whole reverse
    // chain coincide with plain single-resolution diffusion.
    const int N = 20;
    const ResolutionLevel finest{1, 1, 1, "finest"};
    const auto plan = make_plan(N, {}, {finest});
    const auto spec = spec_of(Intensity::CN, Adding::SA, Denoising::SD);
    const auto fine = random_fine(8);
    const Normalizer norm{5.0};
    MultiScaleTraffic lad;
    lad.levels = {fine};
    lad.levels[0].level() = finest;
    RngStream rng(9, "eps");
    const auto eps = normals(rng, kFine.size());
    const auto z0 = norm.to_z(fine);
    for (int n : {1, 7, 19}) {
        const auto s = hnap_forward(lad, plan, spec, norm, n, eps);
        const double a = canonical_alpha(n, N);
        for (std::size_t j = 0; j < eps.size(); ++j)
            EXPECT_NEAR(s.x[j], std::sqrt(a) * z0[j] + std::sqrt(1 - a) * eps[j], 1e-14);
    }

    Predictor lin = [](const StepQuery& q) { return scaled(*q.x, 0.3); };
    SampleOptions so;
    so.seed = 5;
    const auto r = rrdp_sample(lin, plan, spec, norm, kFine, so);
    const auto c = canonical_sample(lin, N, finest, kFine, norm, 5);
    EXPECT_LE(max_rel_diff(r.ladder.finest(), c.finest), 1e-12);
}

TEST(Loss, DeterministicGivenDraw) {
    nn::Denoiser net(small_net_config());
    const auto plan = small_plan();
    const auto spec = spec_of(Intensity::SN, Adding::SA, Denoising::SD);
    Trainer tr(net, plan, spec, Normalizer{5.0}, TrainOptions{});
    Sample s{cond_fixture(), random_fine(10)};
    const auto lad = stage_ladder(s.fine, plan);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        RngStream a(seed, "draw"), b(seed, "draw");
        const auto da = draw_step(plan, kFine, a), db = draw_step(plan, kFine, b);
        EXPECT_EQ(da.n, db.n);
        EXPECT_EQ(tr.item_loss(s, lad, da, false, 1.0), tr.item_loss(s, lad, db, false, 1.0));
    }
}

TEST(Loss, TrainingIsDeterministic) {
    const auto plan = small_plan();
    const auto spec = spec_of(Intensity::SN, Adding::SA, Denoising::SD);
    std::vector<Sample> items{{cond_fixture(), random_fine(11)}, {cond_fixture(), random_fine(12)}};
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch = 2;
    auto run = [&] {
        nn::Denoiser net(small_net_config());
        Trainer tr(net, plan, spec, Normalizer{5.0}, opt);
        const auto hist = tr.fit(items);
        std::vector<double> flat;
        for (auto* b : net.blocks()) flat.insert(flat.end(), b->value.begin(), b->value.end());
        flat.insert(flat.end(), hist.begin(), hist.end());
        return flat;
    };
    EXPECT_EQ(run(), run());
}

TEST(Rrdp, OracleBoundaryFidelityAllCombos) {
    const auto plan = small_plan(16);
    const Normalizer norm{5.0};
    const auto truth = stage_ladder(random_fine(13), plan);
    const auto pred = oracle(truth, norm);
    for (const auto& spec : all_combos()) {
        SampleOptions so;
        so.seed = 21;
        so.true_priors = &truth;
        const auto r = rrdp_sample(pred, plan, spec, norm, kFine, so);
        ASSERT_EQ(r.ladder.K(), 2u);
        EXPECT_EQ(r.steps, 16u);
        EXPECT_LE(max_rel_diff(r.ladder.finest(), truth.finest()), 1e-9) << spec.label();
        if (spec.intensity == Intensity::SN)
            EXPECT_LE(max_rel_diff(r.ladder.levels[0], truth.levels[0]), 1e-9) << spec.label();
    }
}

TEST(Rrdp, OneStepInversion) {
    RngStream rng(14, "inv");
    const auto z0 = normals(rng, 10), eps = normals(rng, 10), z = normals(rng, 10);
    for (double a : {0.05, 0.5, 0.95}) {
        const auto x = forward_mix(z0, eps, a);
        const auto back = reverse_step(x, eps, a, 1.0, 0.7, &z);
        const auto start = predict_start(x, eps, a);
        for (std::size_t i = 0; i < z0.size(); ++i) {
            EXPECT_NEAR(back[i], z0[i] + 0.7 * z[i], 1e-12);
            EXPECT_NEAR(start[i], z0[i], 1e-12);
        }
    }
}

TEST(Rrdp, NetworkForwardCount) {
    nn::Denoiser net(small_net_config());
    const auto plan = small_plan(24);
    const auto before = net.forward_calls;
    const auto r = rrdp_sample(net, cond_fixture(), plan, spec_of(Intensity::SN, Adding::SA, Denoising::SD),
                               Normalizer{5.0}, SampleOptions{});
    EXPECT_EQ(net.forward_calls - before, 24u);
    EXPECT_EQ(r.steps, 24u);
    EXPECT_EQ(r.ladder.finest().extent(), kFine);
    const auto mid = net.forward_calls;
    canonical_sample(net, cond_fixture(), 24, Normalizer{5.0}, 0);
    EXPECT_EQ(net.forward_calls - mid, 24u);
}

TEST(Canonical, DeterministicAndRecorded) {
    nn::Denoiser net(small_net_config());
    const auto a = canonical_sample(net, cond_fixture(), 10, Normalizer{5.0}, 3, {5, 0});
    const auto b = canonical_sample(net, cond_fixture(), 10, Normalizer{5.0}, 3, {5, 0});
    EXPECT_EQ(a.finest.storage(), b.finest.storage());
    EXPECT_EQ(a.recorded_steps, (std::vector<int>{5, 0}));
    EXPECT_EQ(a.intermediates.back().storage(), a.finest.storage());
    const auto c = canonical_sample(net, cond_fixture(), 10, Normalizer{5.0}, 4);
    EXPECT_NE(a.finest.storage(), c.finest.storage());
}

TEST(Refine, ControlFlow) {
    nn::Denoiser net(small_net_config());
    const auto plan = small_plan();
    const auto spec = spec_of(Intensity::SN, Adding::SA, Denoising::SD);
    const auto lad = stage_ladder(random_fine(15), plan);
    const auto cond = cond_fixture();
    const auto same = refine_zero_shot(net, lad.finest(), cond, plan, spec, Normalizer{5.0}, SampleOptions{});
    EXPECT_EQ(same.storage(), lad.finest().storage());

    const auto before = net.forward_calls;
    const auto up = refine_zero_shot(net, lad.levels[0], cond, plan, spec, Normalizer{5.0}, SampleOptions{});
    EXPECT_EQ(up.extent(), kFine);
    EXPECT_EQ(net.forward_calls - before, static_cast<std::size_t>(plan.steps(2)));

    Grid off(ResolutionLevel{0, 4, 1, "x"}, {4, 2, 2}, 1.0);
    EXPECT_THROW(refine_zero_shot(net, off, cond, plan, spec, Normalizer{5.0}, SampleOptions{}), ScheduleError);
}

TEST(Refine, ZeroCoarseStaysFinite) {
    nn::Denoiser net(small_net_config());
    const auto plan = small_plan();
    const auto spec = spec_of(Intensity::SN, Adding::SA, Denoising::CD);
    Grid zero(plan.level(1), level_extent(kFine, plan.level(1)), 0.0);
    const auto out = refine_zero_shot(net, zero, cond_fixture(), plan, spec, Normalizer{5.0}, SampleOptions{});
    for (double v : out.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Refine, OracleRecoversFinest) {
    const auto plan = small_plan();
    const Normalizer norm{5.0};
    const auto truth = stage_ladder(random_fine(16), plan);
    Predictor pred = oracle(truth, norm);
    SampleOptions so;
    const auto r = run_stages(pred, plan, spec_of(Intensity::SN, Adding::SA, Denoising::SD), norm, kFine, so, 2,
                              norm.to_z(truth.levels[0]));
    EXPECT_EQ(r.steps, static_cast<std::size_t>(plan.steps(2)));
    EXPECT_LE(max_rel_diff(r.ladder.finest(), truth.finest()), 1e-9);
}
