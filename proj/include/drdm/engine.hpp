#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "drdm/city.hpp"
#include "drdm/guidance.hpp"
#include "drdm/nn/denoiser.hpp"
#include "drdm/schedule.hpp"

namespace drdm {

/// Maps raw volumes to the unit-free scale the chain runs in:
/// z = scale * x / (cells * peak), where `cells` is the block cardinality of
/// the grid's level when it holds sums (1 for mean renditions).
struct Normalizer {
    double peak = 1.0;
    double scale = 2.0;

    double factor(const ResolutionLevel& l, bool sum_units = true) const {
        return scale / ((sum_units ? l.block_cells() : 1) * peak);
    }
    std::vector<double> to_z(const Grid& raw, bool sum_units = true) const {
        const double f = factor(raw.level(), sum_units);
        std::vector<double> z(raw.size());
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = raw.values()[i] * f;
        return z;
    }
    /// Back to raw sums at `level`.
    Grid to_raw(const std::vector<double>& z, const ResolutionLevel& level, Extent e, Origin o = {}) const {
        const double f = factor(level);
        Grid g(level, e, 0.0, o);
        for (std::size_t i = 0; i < z.size(); ++i) g.values()[i] = z[i] / f;
        return g;
    }
};

/// Finest-resolution training/evaluation window with its conditioning fields.
struct Sample {
    nn::SampleCond cond;
    Grid fine;
};

inline Sample make_sample(const SyntheticCity& city, Origin o, Extent e) {
    Sample s;
    s.cond = nn::slice_context(city.context, o, e);
    s.fine = crop(city.traffic.finest(), o, e);
    return s;
}

/// Windows of tile x tile cells and `window` steps over the given tile origins.
inline std::vector<Sample> make_samples(const SyntheticCity& city, const std::vector<Origin>& tiles, int window) {
    const int T = city.config.t_fine, tile = city.config.tile;
    if (window < 1 || T % window) throw ConfigError("window must divide t_fine");
    std::vector<Sample> out;
    for (const auto& o : tiles)
        for (int t0 = 0; t0 < T; t0 += window) out.push_back(make_sample(city, Origin{t0, o.i0, o.j0}, Extent{window, tile, tile}));
    return out;
}

inline MultiScaleTraffic stage_ladder(const Grid& fine, const RGPPlan& plan) {
    auto levels = plan.stages;
    for (auto& l : levels)
        if (l.label.empty()) l.label = stage_label(l.temporal, l.spatial);
    return build_ladder(fine, levels);
}

inline Extent level_extent(const Extent& fine, const ResolutionLevel& l) {
    return {fine.t / l.temporal, fine.h / l.spatial, fine.w / l.spatial};
}

// ---------------------------------------------------------------------------
// Forward (noising) process

struct DiffusionState {
    std::vector<double> x;
    int n = 0;
    int k = 1;
    int m = 0;
    double alpha = 1.0;
};

inline std::vector<double> forward_mix(const std::vector<double>& start, const std::vector<double>& eps, double alpha) {
    if (start.size() != eps.size()) throw ShapeError("forward: noise shape does not match the stage");
    std::vector<double> x(start.size());
    const double a = std::sqrt(alpha), b = std::sqrt(1.0 - alpha);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = a * start[i] + b * eps[i];
    return x;
}

/// Stage-local noising: x = sqrt(a) x_start + sqrt(1 - a) eps, x_start from
/// noising_start. `n` may be any global step in [0, N].
inline DiffusionState hnap_forward(const MultiScaleTraffic& ladder, const RGPPlan& plan, const ScheduleSpec& spec,
                                   const Normalizer& norm, int n, const std::vector<double>& eps) {
    const auto [k, m] = local_step(plan, n);
    const Grid start = noising_start(plan, spec, k, ladder);
    DiffusionState s;
    s.n = n;
    s.k = k;
    s.m = m;
    s.alpha = alpha_local(plan, spec, k, m);
    s.x = forward_mix(norm.to_z(start, spec.adding == Adding::SA), eps, s.alpha);
    return s;
}

// ---------------------------------------------------------------------------
// Reverse update

/// x_{m-1} = (x_m - (1 - ah) / sqrt(1 - a_m) * noise) / sqrt(ah) + sigma z
inline std::vector<double> reverse_step(const std::vector<double>& x, const std::vector<double>& noise, double alpha_m,
                                        double alpha_prev, double sigma, const std::vector<double>* z) {
    const double ah = alpha_m / alpha_prev;
    const double c = (1.0 - ah) / std::sqrt(1.0 - alpha_m);
    const double inv = 1.0 / std::sqrt(ah);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = (x[i] - c * noise[i]) * inv;
        if (z && sigma != 0.0) out[i] += sigma * (*z)[i];
    }
    return out;
}

/// Endpoint path: the clean start implied by x and a noise estimate.
inline std::vector<double> predict_start(const std::vector<double>& x, const std::vector<double>& noise, double alpha) {
    std::vector<double> out(x.size());
    const double a = std::sqrt(alpha), b = std::sqrt(1.0 - alpha);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - b * noise[i]) / a;
    return out;
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over elements of (fused - eps)^2, where fused = fuse(eps_theta, prior)
/// or eps_theta when there is no fusion. Writes dL/d eps_theta scaled by `weight`.
inline double prior_loss(const std::vector<double>& eps_theta, const std::vector<double>& prior,
                         const std::vector<double>& eps, FusionParams* fusion, std::vector<double>* d_eps_theta,
                         double weight = 1.0) {
    if (eps_theta.size() != eps.size() || (fusion && prior.size() != eps.size()))
        throw ShapeError("loss: tensor sizes differ");
    const double inv = 1.0 / static_cast<double>(eps.size());
    double loss = 0.0;
    if (d_eps_theta) d_eps_theta->assign(eps.size(), 0.0);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double s = fusion ? fusion->apply(eps_theta[i], prior[i]) : eps_theta[i];
        const double r = s - eps[i];
        loss += r * r;
        if (d_eps_theta) {
            const double g = 2.0 * r * inv * weight;
            (*d_eps_theta)[i] = fusion ? fusion->backward(eps_theta[i], prior[i], g) : g;
        }
    }
    return loss * inv;
}

/// H for stage k >= 2: the stage k-1 field (z units) resampled to stage k.
/// replicate_mean in raw units is replicate_value in z units.
inline std::vector<double> prior_source(const std::vector<double>& z_prev, const ResolutionLevel& prev,
                                        const ResolutionLevel& target, const Extent& fine, UpsampleMode mode) {
    Grid g(prev, level_extent(fine, prev), z_prev);
    Grid up = upsample_to(g, target, UpsampleMode::replicate_value);
    if (mode == UpsampleMode::replicate_value) {
        const double r = double(prev.block_cells()) / target.block_cells();
        for (double& v : up.values()) v *= r;
    }
    return up.storage();
}

inline std::vector<double> scaled(const std::vector<double>& h, double r) {
    std::vector<double> out(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) out[i] = r * h[i];
    return out;
}

inline std::vector<double> normals(RngStream& rng, std::size_t count) {
    std::vector<double> v(count);
    for (auto& x : v) x = rng.normal();
    return v;
}

inline void require_finite(const std::vector<double>& v, const std::string& what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(what);
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    int epochs = 1;
    int batch = 8;
    double lr = 2e-3;
    double momentum = 0.9;  // sgd only
    double clip = 1.0;
    std::string optimizer = "adam";  // adam | sgd
    bool cosine_decay = true;        // lr follows a half cosine to zero over all batches
    std::uint64_t seed = 0;
};

enum class PriorMode { teacher, generated };

inline std::string to_string(PriorMode m) { return m == PriorMode::teacher ? "teacher" : "generated"; }
inline PriorMode parse_prior_mode(const std::string& s) {
    if (s == "teacher") return PriorMode::teacher;
    if (s == "generated") return PriorMode::generated;
    throw ConfigError("unknown prior_mode '" + s + "'");
}

struct EngineOptions {
    UpsampleMode prior_upsample = UpsampleMode::replicate_mean;
    /// teacher: H is the true previous level. generated: H is the current
    /// network's one-shot estimate of that level from a noised copy.
    PriorMode prior_mode = PriorMode::teacher;
    /// Std of Gaussian noise added to the teacher-forced coarse field (z units).
    double prior_augment = 0.0;
};

/// One noising draw for a training item.
struct TrainDraw {
    int k = 1, m = 1, n = 1;
    std::vector<double> eps;
    std::vector<double> prior_jitter;  // unit normals at the previous level, empty for k = 1
    int prior_m = 1;                   // local step of the previous stage used by generated priors
};

/// u uniform on [0, N); the item trains stage k = stage_of(u) at local step
/// m = u - N_k + 1, i.e. global step N_k + m.
inline TrainDraw draw_step(const RGPPlan& plan, const Extent& fine, RngStream& rng) {
    TrainDraw d;
    const int u = rng.uniform_int(0, plan.N);
    d.k = stage_of(plan, u);
    d.m = u - plan.lower(d.k) + 1;
    d.n = plan.lower(d.k) + d.m;
    d.eps = normals(rng, level_extent(fine, plan.level(d.k)).size());
    if (d.k > 1) {
        d.prior_jitter = normals(rng, level_extent(fine, plan.level(d.k - 1)).size());
        d.prior_m = rng.uniform_int(1, plan.steps(d.k - 1) + 1);
    }
    return d;
}

class Trainer {
public:
    Trainer(nn::Denoiser& net, RGPPlan plan, ScheduleSpec spec, Normalizer norm, TrainOptions opt,
            EngineOptions eo = {})
        : net_(net), plan_(std::move(plan)), spec_(spec), norm_(norm), opt_(opt), eo_(eo) {
        if (opt.optimizer != "adam" && opt.optimizer != "sgd")
            throw ConfigError("unknown optimizer '" + opt.optimizer + "'");
        sgd_.lr = adam_.lr = opt.lr;
        sgd_.momentum = opt.momentum;
        sgd_.clip = adam_.clip = opt.clip;
    }

    const RGPPlan& plan() const { return plan_; }

    /// Loss of one item for a given draw; accumulates gradients when asked.
    double item_loss(const Sample& s, const MultiScaleTraffic& ladder, const TrainDraw& d, bool grads, double weight) {
        const auto& level = plan_.level(d.k);
        const Grid start = noising_start(plan_, spec_, d.k, ladder);
        const double a = alpha_local(plan_, spec_, d.k, d.m);
        const auto x = forward_mix(norm_.to_z(start, spec_.adding == Adding::SA), d.eps, a);
        std::vector<double> prior, h;
        FusionParams* fusion = net_.fusion ? &*net_.fusion : nullptr;
        const double ac = alpha_clamped(plan_, spec_, d.k, d.m);
        if (fusion) {
            if (d.k == 1) {
                prior.assign(x.size(), 0.0);
            } else {
                const auto& prev = plan_.level(d.k - 1);
                auto z_prev = eo_.prior_mode == PriorMode::generated ? generated_level(s, ladder, d)
                                                                     : norm_.to_z(level_grid(ladder, prev));
                if (eo_.prior_mode == PriorMode::teacher && eo_.prior_augment > 0.0 &&
                    d.prior_jitter.size() == z_prev.size())
                    for (std::size_t i = 0; i < z_prev.size(); ++i) z_prev[i] += eo_.prior_augment * d.prior_jitter[i];
                h = prior_source(z_prev, prev, level, s.fine.extent(), eo_.prior_upsample);
                prior = scaled(h, prior_ratio(ac));
            }
        }
        nn::Denoiser::Cache cache;
        const auto eps_theta = net_.forward_train(x, h, d.n, ac, s.cond, level, cache);
        std::vector<double> d_eps;
        const double loss = prior_loss(eps_theta, prior, d.eps, fusion, grads ? &d_eps : nullptr, weight);
        if (grads) net_.backward(cache, d_eps);
        return loss;
    }

    /// One optimizer step over `batch` (indices into items). Returns the mean loss.
    double train_batch(const std::vector<Sample>& items, const std::vector<MultiScaleTraffic>& ladders,
                       const std::vector<std::size_t>& batch, RngStream rng) {
        nn::zero_grad(net_.blocks());
        double total = 0.0;
        const double w = 1.0 / static_cast<double>(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            auto r = rng.child(b);
            const auto& s = items[batch[b]];
            const auto d = draw_step(plan_, s.fine.extent(), r);
            const double l = item_loss(s, ladders[batch[b]], d, true, w);
            if (!std::isfinite(l))
                throw NumericError("non-finite loss on sample " + std::to_string(batch[b]) + " at step " + std::to_string(d.n));
            total += l;
        }
        if (opt_.optimizer == "adam")
            adam_.step(net_.blocks());
        else
            sgd_.step(net_.blocks());
        return total * w;
    }

    /// Full passes over `items` in seeded shuffled order. Returns mean loss per epoch.
    std::vector<double> fit(const std::vector<Sample>& items) {
        std::vector<MultiScaleTraffic> ladders;
        for (const auto& s : items) ladders.push_back(stage_ladder(s.fine, plan_));
        std::vector<double> history;
        RngStream root(opt_.seed, "train");
        const std::size_t per_epoch = (items.size() + opt_.batch - 1) / static_cast<std::size_t>(opt_.batch);
        const double total = static_cast<double>(per_epoch) * opt_.epochs;
        std::size_t step = 0;
        for (int e = 0; e < opt_.epochs; ++e) {
            auto er = root.child(static_cast<std::uint64_t>(e));
            std::vector<std::size_t> order(items.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            auto shuffle = er.child("order");
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[shuffle.uniform_int(0, static_cast<int>(i))]);
            double sum = 0.0;
            int batches = 0;
            for (std::size_t b0 = 0; b0 < order.size(); b0 += opt_.batch) {
                std::vector<std::size_t> batch(order.begin() + b0,
                                               order.begin() + std::min(order.size(), b0 + opt_.batch));
                if (opt_.cosine_decay)
                    sgd_.lr = adam_.lr = 0.5 * opt_.lr * (1.0 + std::cos(std::acos(-1.0) * step / total));
                ++step;
                sum += train_batch(items, ladders, batch, er.child(static_cast<std::uint64_t>(batches)));
                ++batches;
            }
            history.push_back(batches ? sum / batches : 0.0);
        }
        return history;
    }

private:
    /// Endpoint estimate of stage k-1's level from its state at local step
    /// prior_m, itself guided by the true level k-2.
    std::vector<double> generated_level(const Sample& s, const MultiScaleTraffic& ladder, const TrainDraw& d) const {
        const int j = d.k - 1;
        const auto& level = plan_.level(j);
        const auto z0 = norm_.to_z(noising_start(plan_, spec_, j, ladder), spec_.adding == Adding::SA);
        const double ac = alpha_clamped(plan_, spec_, j, d.prior_m);
        const auto x = forward_mix(z0, d.prior_jitter, alpha_local(plan_, spec_, j, d.prior_m));
        std::vector<double> h;
        if (j > 1) {
            const auto& prev = plan_.level(j - 1);
            h = prior_source(norm_.to_z(level_grid(ladder, prev)), prev, level, s.fine.extent(), eo_.prior_upsample);
        }
        nn::Denoiser::Cache tmp;
        auto noise = net_.forward_train(x, h, plan_.lower(j) + d.prior_m, ac, s.cond, level, tmp);
        if (!h.empty()) noise = fuse_noise(noise, scaled(h, prior_ratio(ac)), *net_.fusion);
        return predict_start(x, noise, ac);
    }

    nn::Denoiser& net_;
    RGPPlan plan_;
    ScheduleSpec spec_;
    Normalizer norm_;
    TrainOptions opt_;
    EngineOptions eo_;
    nn::Sgd sgd_;
    nn::Adam adam_;
};

// ---------------------------------------------------------------------------
// Sampling

/// Everything a noise model may look at for one reverse step.
struct StepQuery {
    int k = 1, m = 1, n = 1;
    const ResolutionLevel* level = nullptr;
    const std::vector<double>* x = nullptr;
    const std::vector<double>* prior = nullptr;   // P; empty when the pathway is off
    const std::vector<double>* source = nullptr;  // H behind P; empty for stage 1 or when off
    double alpha = 0.0;
};

/// Returns the fused noise estimate used by the reverse update.
using Predictor = std::function<std::vector<double>(const StepQuery&)>;

/// The trained network for one conditioning window, with per-level context
/// projections computed once.
class NetworkPredictor {
public:
    NetworkPredictor(const nn::Denoiser& net, const nn::SampleCond& cond) : net_(net), cond_(cond) {
        fused_ = net_.encode(cond_);
    }

    std::vector<double> operator()(const StepQuery& q) {
        auto& lc = level_condition(*q.level);
        static const std::vector<double> none;
        auto eps = net_.forward(*q.x, q.source ? *q.source : none, q.n, q.alpha, lc.first, nullptr, &lc.second);
        if (net_.fusion && q.prior && !q.prior->empty()) return fuse_noise(eps, *q.prior, *net_.fusion);
        return eps;
    }

private:
    std::pair<nn::LevelCondition, nn::Mat>& level_condition(const ResolutionLevel& level) {
        for (auto& [key, value] : cache_)
            if (key == level) return value;
        auto lc = nn::condition_series(fused_, cond_, level, net_.config.city_w);
        auto bias = net_.condition_bias(lc);
        cache_.emplace_back(level, std::make_pair(std::move(lc), std::move(bias)));
        return cache_.back().second;
    }

    const nn::Denoiser& net_;
    nn::SampleCond cond_;
    nn::Mat fused_;
    std::vector<std::pair<ResolutionLevel, std::pair<nn::LevelCondition, nn::Mat>>> cache_;
};

struct SampleOptions {
    std::uint64_t seed = 0;
    /// Feed these levels into the prior instead of the previous stage's output.
    const MultiScaleTraffic* true_priors = nullptr;
    bool prior_enabled = true;
    UpsampleMode prior_upsample = UpsampleMode::replicate_mean;
    /// Per-step CSV rows (n,k,beta,alpha,sigma,state_rms) when set.
    std::ostream* trace = nullptr;
};

struct SampleResult {
    MultiScaleTraffic ladder;            // raw sums at every stage level
    std::vector<std::vector<double>> z;  // boundary states, z units
    std::size_t steps = 0;
};

inline void trace_header(std::ostream& os) { os << "n,k,beta,alpha,sigma,state_rms\n"; }

inline void trace_row(std::ostream& os, int n, int k, double beta, double alpha, double sigma,
                      const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    os << n << ',' << k << ',' << beta << ',' << alpha << ',' << sigma << ',' << std::sqrt(s / x.size()) << '\n';
}

/// Runs stages first_stage..K. `carried` is the boundary state (z units) of
/// stage first_stage - 1 when first_stage > 1.
inline SampleResult run_stages(Predictor& predict, const RGPPlan& plan, const ScheduleSpec& spec,
                               const Normalizer& norm, const Extent& fine, const SampleOptions& so, int first_stage,
                               std::vector<double> carried) {
    SampleResult res;
    RngStream root(so.seed, "rrdp");
    std::vector<double> prev_out = std::move(carried);
    for (int k = first_stage; k <= plan.K(); ++k) {
        const auto& level = plan.level(k);
        const Extent e = level_extent(fine, level);
        auto rng = root.child(static_cast<std::uint64_t>(k));
        const bool has_prev = k > 1;
        const auto& prev_level = has_prev ? plan.level(k - 1) : level;

        std::vector<double> x;
        if (has_prev && spec.denoising == Denoising::CD) {
            x = prior_source(prev_out, prev_level, level, fine, UpsampleMode::replicate_mean);
        } else {
            x = normals(rng, e.size());
        }

        std::vector<double> h;
        if (so.prior_enabled && has_prev) {
            const std::vector<double> src =
                so.true_priors ? norm.to_z(level_grid(*so.true_priors, prev_level)) : prev_out;
            h = prior_source(src, prev_level, level, fine, so.prior_upsample);
        }

        for (int m = plan.steps(k); m >= 1; --m) {
            const double a_m = alpha_clamped(plan, spec, k, m);
            const double a_p = alpha_local(plan, spec, k, m - 1);
            const double sig = sigma_local(plan, spec, k, m);
            std::vector<double> prior;
            if (so.prior_enabled) prior = h.empty() ? std::vector<double>(x.size(), 0.0) : scaled(h, prior_ratio(a_m));
            StepQuery q{k, m, plan.lower(k) + m, &level, &x, &prior, &h, a_m};
            const auto noise = predict(q);
            const auto z = normals(rng, x.size());
            x = reverse_step(x, noise, a_m, a_p, sig, &z);
            require_finite(x, "non-finite state at step " + std::to_string(q.n));
            if (so.trace) trace_row(*so.trace, q.n - 1, k, beta_local(plan, spec, k, m - 1), a_p, sig, x);
            ++res.steps;
        }
        res.ladder.levels.push_back(norm.to_raw(x, level, e));
        res.ladder.levels.back().level().index = k;
        res.ladder.levels.back().level().label = level.label;
        res.z.push_back(x);
        prev_out = std::move(x);
    }
    return res;
}

/// Full resolution-refinement chain from pure noise.
inline SampleResult rrdp_sample(Predictor predict, const RGPPlan& plan, const ScheduleSpec& spec,
                                const Normalizer& norm, const Extent& fine, const SampleOptions& so) {
    return run_stages(predict, plan, spec, norm, fine, so, 1, {});
}

inline SampleResult rrdp_sample(const nn::Denoiser& net, const nn::SampleCond& cond, const RGPPlan& plan,
                                const ScheduleSpec& spec, const Normalizer& norm, SampleOptions so) {
    so.prior_enabled = so.prior_enabled && net.fusion.has_value();
    auto np = std::make_shared<NetworkPredictor>(net, cond);
    return rrdp_sample([np](const StepQuery& q) { return (*np)(q); }, plan, spec, norm, cond.extent, so);
}

/// Starts the chain from a known coarse field at some stage level and runs
/// only the remaining stages. Returns the finest output (raw sums).
inline Grid refine_zero_shot(const nn::Denoiser& net, const Grid& coarse, const nn::SampleCond& cond,
                             const RGPPlan& plan, const ScheduleSpec& spec, const Normalizer& norm, SampleOptions so) {
    int j = 0;
    for (int k = 1; k <= plan.K(); ++k)
        if (plan.level(k) == coarse.level()) j = k;
    if (j == 0) throw ScheduleError("refine: coarse level is not a stage of the plan");
    if (j == plan.K()) return coarse;
    so.prior_enabled = so.prior_enabled && net.fusion.has_value();
    auto np = std::make_shared<NetworkPredictor>(net, cond);
    Predictor p = [np](const StepQuery& q) { return (*np)(q); };
    auto res = run_stages(p, plan, spec, norm, cond.extent, so, j + 1, norm.to_z(coarse));
    return res.ladder.levels.back();
}

// ---------------------------------------------------------------------------
// Canonical single-resolution diffusion (baseline)

struct CanonicalResult {
    Grid finest;
    std::vector<Grid> intermediates;  // finest-level states at the requested steps
    std::vector<int> recorded_steps;
};

/// alpha_n = 1 - n / N, interior values clamped.
inline double canonical_alpha(int n, int N, double lo = 1e-4, double hi = 1.0 - 1e-4) {
    if (n <= 0) return 1.0;
    if (n >= N) return 0.0;
    return std::clamp(1.0 - double(n) / N, lo, hi);
}

/// Plain reverse chain at the finest level; `record` lists global steps whose
/// states are kept.
inline CanonicalResult canonical_sample(Predictor predict, int N, const ResolutionLevel& finest, const Extent& e,
                                        const Normalizer& norm, std::uint64_t seed, SigmaForm form = SigmaForm::mixed,
                                        bool sigma_off = false, const std::vector<int>& record = {}) {
    CanonicalResult res;
    auto rng = RngStream(seed, "rrdp").child(std::uint64_t{1});
    std::vector<double> x = normals(rng, e.size());
    auto clamped = [N](int n) { return std::clamp(1.0 - double(n) / N, 1e-4, 1.0 - 1e-4); };
    for (int n = N; n >= 1; --n) {
        const double a_n = clamped(n);
        const double a_p = canonical_alpha(n - 1, N);
        double sig = 0.0;
        if (n >= 2 && !sigma_off) {
            if (form == SigmaForm::mixed) {
                const double ah_p = a_p / canonical_alpha(n - 2, N);
                sig = std::sqrt(std::max(0.0, 1.0 - ah_p)) * (1.0 - a_p) / (1.0 - a_n);
            } else {
                sig = std::sqrt(std::max(0.0, (1.0 - a_p) / (1.0 - a_n) * (1.0 - a_n / a_p)));
            }
        }
        std::vector<double> prior(x.size(), 0.0);
        StepQuery q{1, n, n, &finest, &x, &prior, nullptr, a_n};
        const auto noise = predict(q);
        const auto z = normals(rng, x.size());
        const double ah = a_n / a_p;
        const double c = (1.0 - ah) / std::sqrt(1.0 - a_n);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - c * noise[i]) / std::sqrt(ah) + sig * z[i];
        require_finite(x, "non-finite state at step " + std::to_string(n));
        if (std::find(record.begin(), record.end(), n - 1) != record.end()) {
            res.intermediates.push_back(norm.to_raw(x, finest, e));
            res.recorded_steps.push_back(n - 1);
        }
    }
    res.finest = norm.to_raw(x, finest, e);
    return res;
}

inline CanonicalResult canonical_sample(const nn::Denoiser& net, const nn::SampleCond& cond, int N,
                                        const Normalizer& norm, std::uint64_t seed, const std::vector<int>& record = {}) {
    ResolutionLevel finest{1, 1, 1, "finest"};
    auto np = std::make_shared<NetworkPredictor>(net, cond);
    return canonical_sample([np](const StepQuery& q) { return (*np)(q); }, N, finest, cond.extent, norm, seed,
                            SigmaForm::mixed, false, record);
}

/// Standard epsilon-prediction loss at the finest level, written directly.
inline double canonical_loss(nn::Denoiser& net, const Sample& s, const Normalizer& norm, int N, RngStream& rng,
                             bool grads, double weight = 1.0) {
    const int n = rng.uniform_int(0, N) + 1;
    const auto eps = normals(rng, s.fine.size());
    const double a = canonical_alpha(n, N);
    const auto x0 = norm.to_z(s.fine);
    std::vector<double> x(x0.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sqrt(a) * x0[i] + std::sqrt(1.0 - a) * eps[i];
    nn::Denoiser::Cache cache;
    ResolutionLevel finest{1, 1, 1, "finest"};
    const auto out =
        net.forward_train(x, {}, n, std::clamp(1.0 - double(n) / N, 1e-4, 1.0 - 1e-4), s.cond, finest, cache);
    double loss = 0.0;
    std::vector<double> d(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double r = out[i] - eps[i];
        loss += r * r;
        d[i] = 2.0 * r / out.size() * weight;
    }
    if (grads) net.backward(cache, d);
    return loss / out.size();
}

} // namespace drdm
