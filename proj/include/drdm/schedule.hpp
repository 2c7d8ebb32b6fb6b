#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "drdm/error.hpp"
#include "drdm/grid.hpp"

namespace drdm {

enum class Strategy { uniform, coarse_greedy, fine_greedy };
enum class Intensity { CN, SN };
enum class Adding { CA, SA };
enum class Denoising { CD, SD };
// mixed: previous-step cumulative and per-step alpha combined; ddpm_posterior: standard posterior std.
enum class SigmaForm { mixed, ddpm_posterior };

inline std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::uniform: return "uniform";
    case Strategy::coarse_greedy: return "coarse_greedy";
    default: return "fine_greedy";
    }
}
inline std::string to_string(Intensity v) { return v == Intensity::CN ? "CN" : "SN"; }
inline std::string to_string(Adding v) { return v == Adding::CA ? "CA" : "SA"; }
inline std::string to_string(Denoising v) { return v == Denoising::CD ? "CD" : "SD"; }
inline std::string to_string(SigmaForm v) { return v == SigmaForm::mixed ? "mixed" : "ddpm_posterior"; }

inline Strategy parse_strategy(const std::string& s) {
    if (s == "uniform") return Strategy::uniform;
    if (s == "coarse_greedy") return Strategy::coarse_greedy;
    if (s == "fine_greedy") return Strategy::fine_greedy;
    throw ConfigError("unknown strategy '" + s + "'");
}

/// Stage k (1-based) owns global steps [boundaries[k-1], upper(k)), where
/// upper(1) = N and upper(k) = boundaries[k-2]. The last boundary is 0.
struct RGPPlan {
    int N = 0;
    std::vector<int> boundaries;
    std::vector<ResolutionLevel> stages;
    Strategy strategy = Strategy::uniform;

    int K() const { return static_cast<int>(boundaries.size()); }
    int lower(int k) const { return boundaries.at(k - 1); }
    int upper(int k) const { return k == 1 ? N : boundaries.at(k - 2); }
    int steps(int k) const { return upper(k) - lower(k); }
    const ResolutionLevel& level(int k) const { return stages.at(k - 1); }
    /// The K-1 interior boundaries, descending.
    std::vector<int> interior() const { return {boundaries.begin(), boundaries.end() - 1}; }
};

inline std::string stage_label(int temporal, int spatial) {
    return "t" + std::to_string(temporal) + "s" + std::to_string(spatial);
}

/// Builds a plan from explicit boundaries. Each stage needs at least one step.
inline RGPPlan make_plan(int N, std::vector<int> interior, std::vector<ResolutionLevel> stages,
                         Strategy strategy = Strategy::uniform) {
    if (N < 1) throw ScheduleError("plan: N must be >= 1");
    if (stages.size() != interior.size() + 1)
        throw ScheduleError("plan: " + std::to_string(stages.size()) + " stage levels for " +
                            std::to_string(interior.size() + 1) + " stages");
    RGPPlan p;
    p.N = N;
    p.boundaries = std::move(interior);
    p.boundaries.push_back(0);
    int prev = N;
    for (int b : p.boundaries) {
        if (b >= prev) throw ScheduleError("plan: boundaries must be strictly decreasing below N");
        prev = b;
    }
    for (std::size_t k = 0; k < stages.size(); ++k) {
        stages[k].index = static_cast<int>(k) + 1;
        if (stages[k].label.empty()) stages[k].label = stage_label(stages[k].temporal, stages[k].spatial);
        if (k > 0 && (stages[k].spatial > stages[k - 1].spatial || stages[k].temporal > stages[k - 1].temporal))
            throw ScheduleError("plan: stage " + std::to_string(k + 1) + " is coarser than stage " + std::to_string(k));
    }
    p.stages = std::move(stages);
    p.strategy = strategy;
    return p;
}

/// Single-stage plan at one level (the canonical, prior-free chain).
inline RGPPlan single_stage_plan(int N, ResolutionLevel level) { return make_plan(N, {}, {std::move(level)}); }

/// Partitions N steps among resolution stages.
///
/// `spatial` and `temporal` list coarsening factors coarse to fine. Greedy
/// strategies use K = max(|S|, |T|) evenly sized stages; the shorter list
/// reaches its finest entry early (fine_greedy) or only in the last stages
/// (coarse_greedy). Uniform splits N evenly per dimension and takes the union
/// of both dimensions' boundaries.
inline RGPPlan plan_rgp(const std::vector<int>& spatial, const std::vector<int>& temporal, int N, Strategy strategy) {
    if (spatial.empty() || temporal.empty()) throw ScheduleError("plan_rgp: level lists must be non-empty");
    const int ns = static_cast<int>(spatial.size()), nt = static_cast<int>(temporal.size());
    auto even = [N](int parts) {
        std::vector<int> b;
        for (int i = parts - 1; i >= 1; --i) b.push_back(static_cast<int>(std::lround(double(N) * i / parts)));
        return b;
    };
    std::vector<int> interior;
    std::vector<ResolutionLevel> stages;
    if (strategy == Strategy::uniform) {
        std::set<int, std::greater<>> all;
        for (int b : even(ns)) all.insert(b);
        for (int b : even(nt)) all.insert(b);
        interior.assign(all.begin(), all.end());
        const auto bs = even(ns), bt = even(nt);
        auto level_at = [](const std::vector<int>& bounds, int n) {
            int idx = 0;
            for (int b : bounds)
                if (n < b) ++idx;
            return idx;
        };
        std::vector<int> lowers = interior;
        lowers.push_back(0);
        for (int lo : lowers) {
            ResolutionLevel l;
            l.spatial = spatial[level_at(bs, lo)];
            l.temporal = temporal[level_at(bt, lo)];
            stages.push_back(l);
        }
    } else {
        const int K = std::max(ns, nt);
        interior = even(K);
        for (int k = 1; k <= K; ++k) {
            auto pick = [&](int count) {
                if (count == K) return k;
                return strategy == Strategy::fine_greedy ? std::min(k, count) : std::max(1, k - (K - count));
            };
            ResolutionLevel l;
            l.spatial = spatial[pick(ns) - 1];
            l.temporal = temporal[pick(nt) - 1];
            stages.push_back(l);
        }
    }
    if (stages.size() < 2) throw ScheduleError("plan_rgp: need K >= 2 stages, got K = " + std::to_string(stages.size()));
    RGPPlan p = make_plan(N, interior, stages, strategy);
    for (int k = 1; k <= p.K(); ++k)
        if (p.steps(k) < 2)
            throw ScheduleError("plan_rgp: N = " + std::to_string(N) + " too small for " + std::to_string(p.K()) +
                                " stages of >= 2 steps");
    return p;
}

struct ScheduleSpec {
    Intensity intensity = Intensity::SN;
    Adding adding = Adding::SA;
    Denoising denoising = Denoising::SD;
    double alpha_min = 1e-4;
    double alpha_max = 1.0 - 1e-4;
    SigmaForm sigma_form = SigmaForm::mixed;
    /// Zeroes every sigma (deterministic chain).
    bool sigma_off = false;

    std::string label() const {
        return "[" + to_string(intensity) + "," + to_string(adding) + "," + to_string(denoising) + "]";
    }
    void validate() const {
        if (!(alpha_min > 0.0 && alpha_min < alpha_max && alpha_max < 1.0))
            throw ConfigError("alpha clamp must satisfy 0 < alpha_min < alpha_max < 1");
    }
};

/// Stage containing global step n in [0, N).
inline int stage_of(const RGPPlan& plan, int n) {
    if (n < 0 || n >= plan.N)
        throw ScheduleError("stage_of: n = " + std::to_string(n) + " outside [0, " + std::to_string(plan.N) + ")");
    for (int k = 1; k <= plan.K(); ++k)
        if (n >= plan.lower(k)) return k;
    throw ScheduleError("stage_of: unreachable");
}

/// Stage-local position: global n = lower(k) + m with m in [0, steps(k)].
/// n = N maps to the top of stage 1.
struct LocalStep {
    int k;
    int m;
};

inline LocalStep local_step(const RGPPlan& plan, int n) {
    if (n == plan.N) return {1, plan.steps(1)};
    const int k = stage_of(plan, n);
    return {k, n - plan.lower(k)};
}

inline void check_local(const RGPPlan& plan, int k, int m) {
    if (k < 1 || k > plan.K()) throw ScheduleError("stage " + std::to_string(k) + " not in plan");
    if (m < 0 || m > plan.steps(k))
        throw ScheduleError("local step " + std::to_string(m) + " outside stage " + std::to_string(k));
}

/// Noise strength at local step m of stage k.
inline double beta_local(const RGPPlan& plan, const ScheduleSpec& spec, int k, int m) {
    check_local(plan, k, m);
    if (spec.intensity == Intensity::CN) return double(plan.lower(k) + m) / plan.N;
    return double(m) / plan.steps(k);
}

/// Cumulative alpha = 1 - beta, clamped for interior beta only.
inline double alpha_local(const RGPPlan& plan, const ScheduleSpec& spec, int k, int m) {
    const double b = beta_local(plan, spec, k, m);
    if (b <= 0.0) return 1.0;
    if (b >= 1.0) return 0.0;
    return std::clamp(1.0 - b, spec.alpha_min, spec.alpha_max);
}

/// Alpha with both ends clamped; used where a division needs it.
inline double alpha_clamped(const RGPPlan& plan, const ScheduleSpec& spec, int k, int m) {
    return std::clamp(1.0 - beta_local(plan, spec, k, m), spec.alpha_min, spec.alpha_max);
}

inline double noise_level(const RGPPlan& plan, const ScheduleSpec& spec, int n) {
    if (n < 0 || n > plan.N) throw ScheduleError("noise_level: n = " + std::to_string(n) + " out of range");
    const auto [k, m] = local_step(plan, n);
    return beta_local(plan, spec, k, m);
}

inline double alpha(const RGPPlan& plan, const ScheduleSpec& spec, int n) {
    if (n < 0 || n > plan.N) throw ScheduleError("alpha: n = " + std::to_string(n) + " out of range");
    const auto [k, m] = local_step(plan, n);
    return alpha_local(plan, spec, k, m);
}

/// Per-step factor alpha_m / alpha_{m-1} with alpha_{-1} = 1.
inline double alpha_hat_local(const RGPPlan& plan, const ScheduleSpec& spec, int k, int m) {
    const double prev = m >= 1 ? alpha_local(plan, spec, k, m - 1) : 1.0;
    return alpha_local(plan, spec, k, m) / prev;
}

/// Reverse-step noise scale for the move m -> m-1 (m >= 1). Zero on the
/// terminal step of each stage.
inline double sigma_local(const RGPPlan& plan, const ScheduleSpec& spec, int k, int m) {
    check_local(plan, k, m);
    if (m < 1) throw ScheduleError("sigma: local step must be >= 1");
    if (m == 1 || spec.sigma_off) return 0.0;
    const double a_m = alpha_clamped(plan, spec, k, m);
    const double a_p = alpha_local(plan, spec, k, m - 1);
    if (spec.sigma_form == SigmaForm::mixed) {
        const double ah_p = alpha_hat_local(plan, spec, k, m - 1);
        return std::sqrt(std::max(0.0, 1.0 - ah_p)) * (1.0 - a_p) / (1.0 - a_m);
    }
    const double ah = a_m / a_p;
    return std::sqrt(std::max(0.0, (1.0 - a_p) / (1.0 - a_m) * (1.0 - ah)));
}

inline double sigma(const RGPPlan& plan, const ScheduleSpec& spec, int n) {
    if (n < 1 || n > plan.N) throw ScheduleError("sigma: n = " + std::to_string(n) + " out of range");
    const auto [k, m] = local_step(plan, n);
    if (m == 0) throw ScheduleError("sigma: n = " + std::to_string(n) + " is a stage boundary; use the stage below");
    return sigma_local(plan, spec, k, m);
}

/// Ladder entry at `level`, matched by factors.
inline const Grid& level_grid(const MultiScaleTraffic& ladder, const ResolutionLevel& level) {
    for (const auto& g : ladder.levels)
        if (g.level() == level) return g;
    throw ScheduleError("ladder has no level with factors (t=" + std::to_string(level.temporal) +
                        ", s=" + std::to_string(level.spatial) + ")");
}

/// Clean start of the forward chain for stage k. SA: the ladder's own level.
/// CA: the finest grid block-averaged to the stage resolution (mean rendition,
/// so a constant field stays constant).
inline Grid noising_start(const RGPPlan& plan, const ScheduleSpec& spec, int k, const MultiScaleTraffic& ladder) {
    if (k < 1 || k > plan.K()) throw ScheduleError("noising_start: stage " + std::to_string(k) + " not in plan");
    const auto& lvl = plan.level(k);
    if (spec.adding == Adding::SA) return level_grid(ladder, lvl);
    const Grid& fine = ladder.finest();
    if (fine.level().spatial != 1 || fine.level().temporal != 1)
        throw ScheduleError("noising_start: ladder has no finest level");
    Grid g = coarsen(fine, lvl.temporal, lvl.spatial, CoarsenMode::mean);
    g.level() = lvl;
    return g;
}

} // namespace drdm
