#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "drdm/bundle.hpp"
#include "drdm/city.hpp"
#include "drdm/config.hpp"
#include "drdm/engine.hpp"
#include "drdm/metrics.hpp"
#include "drdm/schedule.hpp"

namespace drdm {

inline std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    for (const auto& tok : KeyValues::split(s, ',')) {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || tok.empty()) throw ConfigError("expected comma-separated integers, got '" + s + "'");
        out.push_back(v);
    }
    return out;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("expected boolean, got '" + s + "'");
}

/// Everything one run needs. Keys are dotted: city.*, data.*, plan.*, spec.*,
/// model.*, train.*, eval.*, output.*.
struct ExperimentConfig {
    CityConfig city;
    std::string dataset;  // city bundle directory; empty synthesizes from city.*
    int window = 24;
    int stride = 2;

    std::vector<int> spatial = {4, 2, 1};
    std::vector<int> temporal = {2, 1};
    int N = 300;
    Strategy strategy = Strategy::fine_greedy;

    ScheduleSpec spec;

    int latent = 64, hidden = 64, channels = 32;
    int fusion_dim = 32;
    PriorSign prior_sign = PriorSign::minus;
    bool use_tpe = true, use_spe = true;

    TrainOptions train;
    PriorMode prior_mode = PriorMode::teacher;
    double prior_augment = 0.0;

    std::vector<int> eval_seeds = {0};
    int max_samples = 0;  // 0: every held-out window
    bool true_priors = false;

    std::string output_dir = "out";

    ExperimentConfig() { train.epochs = 20; }

    static std::set<std::string> keys() {
        std::set<std::string> k;
        for (const auto& c : CityConfig::keys()) k.insert("city." + c);
        for (const char* s :
             {"data.bundle", "data.window", "data.stride", "plan.spatial", "plan.temporal", "plan.N", "plan.strategy",
              "spec.intensity", "spec.adding", "spec.denoising", "spec.alpha_min", "spec.alpha_max", "spec.sigma_form",
              "spec.sigma_off", "model.latent", "model.hidden", "model.channels", "model.fusion_dim", "model.prior_sign",
              "model.tpe", "model.spe", "train.epochs", "train.batch", "train.lr", "train.momentum", "train.clip",
              "train.optimizer", "train.cosine_decay", "train.seed", "train.prior_mode", "train.prior_augment",
              "eval.seeds", "eval.max_samples", "eval.true_priors", "output.dir"})
            k.insert(s);
        return k;
    }

    /// Validates every key; all problems are reported in one ConfigError.
    static ExperimentConfig from(const KeyValues& kv) {
        ExperimentConfig c;
        std::vector<std::string> problems;
        for (const auto& k : kv.unknown_keys(keys())) problems.push_back(k + ": unknown key");

        KeyValues city_kv;
        for (const auto& [k, v] : kv.entries())
            if (k.rfind("city.", 0) == 0 && CityConfig::keys().count(k.substr(5))) city_kv.set(k.substr(5), v);
        try {
            c.city = CityConfig::from(city_kv, "city.");
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        }

        auto guarded = [&](const std::string& key, auto&& fn) {
            if (!kv.has(key)) return;
            try {
                fn(kv.str(key, ""));
            } catch (const Error& e) {
                problems.push_back(key + ": " + e.what());
            }
        };
        auto integer = [&](const std::string& key, int& dst) { dst = static_cast<int>(kv.integer(key, dst, problems)); };
        auto real = [&](const std::string& key, double& dst) { dst = kv.real(key, dst, problems); };
        auto boolean = [&](const std::string& key, bool& dst) { guarded(key, [&](const std::string& s) { dst = parse_bool(s); }); };

        c.dataset = kv.str("data.bundle", "");
        integer("data.window", c.window);
        integer("data.stride", c.stride);
        guarded("plan.spatial", [&](const std::string& s) { c.spatial = parse_ints(s); });
        guarded("plan.temporal", [&](const std::string& s) { c.temporal = parse_ints(s); });
        integer("plan.N", c.N);
        guarded("plan.strategy", [&](const std::string& s) { c.strategy = parse_strategy(s); });
        guarded("spec.intensity", [&](const std::string& s) {
            if (s != "CN" && s != "SN") throw ConfigError("expected CN or SN");
            c.spec.intensity = s == "CN" ? Intensity::CN : Intensity::SN;
        });
        guarded("spec.adding", [&](const std::string& s) {
            if (s != "CA" && s != "SA") throw ConfigError("expected CA or SA");
            c.spec.adding = s == "CA" ? Adding::CA : Adding::SA;
        });
        guarded("spec.denoising", [&](const std::string& s) {
            if (s != "CD" && s != "SD") throw ConfigError("expected CD or SD");
            c.spec.denoising = s == "CD" ? Denoising::CD : Denoising::SD;
        });
        real("spec.alpha_min", c.spec.alpha_min);
        real("spec.alpha_max", c.spec.alpha_max);
        guarded("spec.sigma_form", [&](const std::string& s) {
            if (s != "mixed" && s != "ddpm_posterior") throw ConfigError("expected mixed or ddpm_posterior");
            c.spec.sigma_form = s == "mixed" ? SigmaForm::mixed : SigmaForm::ddpm_posterior;
        });
        boolean("spec.sigma_off", c.spec.sigma_off);
        integer("model.latent", c.latent);
        integer("model.hidden", c.hidden);
        integer("model.channels", c.channels);
        integer("model.fusion_dim", c.fusion_dim);
        guarded("model.prior_sign", [&](const std::string& s) { c.prior_sign = parse_prior_sign(s); });
        boolean("model.tpe", c.use_tpe);
        boolean("model.spe", c.use_spe);
        integer("train.epochs", c.train.epochs);
        integer("train.batch", c.train.batch);
        real("train.lr", c.train.lr);
        real("train.momentum", c.train.momentum);
        real("train.clip", c.train.clip);
        c.train.optimizer = kv.str("train.optimizer", c.train.optimizer);
        boolean("train.cosine_decay", c.train.cosine_decay);
        c.train.seed = static_cast<std::uint64_t>(kv.integer("train.seed", static_cast<long long>(c.train.seed), problems));
        guarded("train.prior_mode", [&](const std::string& s) { c.prior_mode = parse_prior_mode(s); });
        real("train.prior_augment", c.prior_augment);
        guarded("eval.seeds", [&](const std::string& s) { c.eval_seeds = parse_ints(s); });
        integer("eval.max_samples", c.max_samples);
        boolean("eval.true_priors", c.true_priors);
        c.output_dir = kv.str("output.dir", c.output_dir);

        auto more = c.validation_problems();
        problems.insert(problems.end(), more.begin(), more.end());
        if (!problems.empty()) throw ConfigError(KeyValues::join(problems, "; "));
        return c;
    }

    std::vector<std::string> validation_problems() const {
        std::vector<std::string> p;
        if (window < 1 || city.t_fine % window) p.push_back("data.window: must divide city.t_fine");
        if (stride < 1) p.push_back("data.stride: must be >= 1");
        if (N < 2) p.push_back("plan.N: must be >= 2");
        try {
            auto plan = build_plan();
            for (const auto& l : plan.stages)
                if (window % l.temporal || city.tile % l.spatial)
                    p.push_back("plan: level " + l.label + " does not divide the " + std::to_string(window) + "x" +
                                std::to_string(city.tile) + " window");
        } catch (const Error& e) {
            p.push_back(std::string("plan: ") + e.what());
        }
        try {
            spec.validate();
        } catch (const Error& e) {
            p.push_back(std::string("spec: ") + e.what());
        }
        if (latent < 1 || hidden < 1 || channels < 1) p.push_back("model: widths must be positive");
        if (fusion_dim < 0) p.push_back("model.fusion_dim: must be >= 0");
        if (train.epochs < 0) p.push_back("train.epochs: must be >= 0");
        if (train.batch < 1) p.push_back("train.batch: must be >= 1");
        if (!(train.lr > 0.0)) p.push_back("train.lr: must be positive");
        if (train.optimizer != "adam" && train.optimizer != "sgd") p.push_back("train.optimizer: expected adam or sgd");
        if (prior_augment < 0.0) p.push_back("train.prior_augment: must be >= 0");
        if (eval_seeds.empty()) p.push_back("eval.seeds: at least one seed");
        if (max_samples < 0) p.push_back("eval.max_samples: must be >= 0");
        return p;
    }

    RGPPlan build_plan() const { return plan_rgp(spatial, temporal, N, strategy); }

    nn::DenoiserConfig denoiser_config(std::uint64_t seed) const {
        nn::DenoiserConfig d;
        d.latent = latent;
        d.hidden = hidden;
        d.channels = channels;
        d.surface_classes = city.surface_classes;
        d.aoi_classes = city.aoi_classes;
        d.poi_dim = city.poi_dim;
        d.city_h = city.h_fine;
        d.city_w = city.w_fine;
        d.spatial_levels = spatial;
        d.use_tpe = use_tpe;
        d.use_spe = use_spe;
        d.fusion_dim = fusion_dim;
        d.prior_sign = prior_sign;
        d.seed = seed;
        return d;
    }

    EngineOptions engine_options() const {
        EngineOptions eo;
        eo.prior_mode = prior_mode;
        eo.prior_augment = prior_augment;
        return eo;
    }

    /// Resolved snapshot: every key with its effective value.
    KeyValues resolved() const {
        KeyValues kv;
        const auto ck = city.to_key_values();
        for (const auto& [k, v] : ck.entries()) kv.set("city." + k, v);
        kv.set("data.bundle", dataset);
        kv.set("data.window", std::to_string(window));
        kv.set("data.stride", std::to_string(stride));
        kv.set("plan.spatial", join_ints(spatial));
        kv.set("plan.temporal", join_ints(temporal));
        kv.set("plan.N", std::to_string(N));
        kv.set("plan.strategy", to_string(strategy));
        kv.set("spec.intensity", to_string(spec.intensity));
        kv.set("spec.adding", to_string(spec.adding));
        kv.set("spec.denoising", to_string(spec.denoising));
        kv.set("spec.alpha_min", fmt(spec.alpha_min));
        kv.set("spec.alpha_max", fmt(spec.alpha_max));
        kv.set("spec.sigma_form", to_string(spec.sigma_form));
        kv.set("spec.sigma_off", spec.sigma_off ? "true" : "false");
        kv.set("model.latent", std::to_string(latent));
        kv.set("model.hidden", std::to_string(hidden));
        kv.set("model.channels", std::to_string(channels));
        kv.set("model.fusion_dim", std::to_string(fusion_dim));
        kv.set("model.prior_sign", to_string(prior_sign));
        kv.set("model.tpe", use_tpe ? "true" : "false");
        kv.set("model.spe", use_spe ? "true" : "false");
        kv.set("train.epochs", std::to_string(train.epochs));
        kv.set("train.batch", std::to_string(train.batch));
        kv.set("train.lr", fmt(train.lr));
        kv.set("train.momentum", fmt(train.momentum));
        kv.set("train.clip", fmt(train.clip));
        kv.set("train.optimizer", train.optimizer);
        kv.set("train.cosine_decay", train.cosine_decay ? "true" : "false");
        kv.set("train.seed", std::to_string(train.seed));
        kv.set("train.prior_mode", to_string(prior_mode));
        kv.set("train.prior_augment", fmt(prior_augment));
        kv.set("eval.seeds", join_ints(eval_seeds));
        kv.set("eval.max_samples", std::to_string(max_samples));
        kv.set("eval.true_priors", true_priors ? "true" : "false");
        kv.set("output.dir", output_dir);
        return kv;
    }

private:
    static std::string fmt(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Data

struct Dataset {
    SyntheticCity city;
    TileSplit split;
    std::vector<Sample> train;       // strided windows over training tiles
    std::vector<Sample> validation;  // non-overlapping windows over held-out tiles
};

inline Dataset make_dataset(const ExperimentConfig& cfg, const SyntheticCity& city) {
    Dataset d;
    d.city = city;
    d.split = split_tiles(city.config, city.seed);
    const int T = city.config.t_fine, tile = city.config.tile;
    for (const auto& o : d.split.train)
        for (int t0 = 0; t0 + cfg.window <= T; t0 += cfg.stride)
            d.train.push_back(make_sample(city, Origin{t0, o.i0, o.j0}, Extent{cfg.window, tile, tile}));
    d.validation = make_samples(city, d.split.validation, cfg.window);
    return d;
}

inline SyntheticCity load_or_generate_city(const ExperimentConfig& cfg) {
    if (!cfg.dataset.empty()) return city_from_bundle(load_bundle(cfg.dataset));
    return generate_city(cfg.city, cfg.city.seed);
}

// ---------------------------------------------------------------------------
// Training

struct TrainedModel {
    nn::Denoiser net;
    std::vector<double> losses;
    double seconds = 0.0;
};

inline TrainedModel train_model(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed) {
    TrainedModel m{nn::Denoiser(cfg.denoiser_config(seed)), {}, 0.0};
    auto opt = cfg.train;
    opt.seed = seed;
    Trainer trainer(m.net, cfg.build_plan(), cfg.spec, Normalizer{data.city.psnr_peak}, opt, cfg.engine_options());
    const auto t0 = std::chrono::steady_clock::now();
    m.losses = trainer.fit(data.train);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

inline TensorBundle checkpoint_bundle(nn::Denoiser& net, const ExperimentConfig& cfg, std::uint64_t seed) {
    TensorBundle b;
    net.save(b);
    b.metadata["kind"] = "checkpoint";
    b.metadata["config"] = cfg.resolved().dump();
    b.metadata["seed"] = seed;
    return b;
}

inline nn::Denoiser load_checkpoint(const TensorBundle& b, const ExperimentConfig& cfg) {
    if (b.metadata.value("kind", std::string()) != "checkpoint")
        throw BundleError(BundleError::Code::malformed, "bundle is not a checkpoint");
    nn::Denoiser net(cfg.denoiser_config(b.metadata.value("seed", std::uint64_t{0})));
    net.load(b);
    return net;
}

// ---------------------------------------------------------------------------
// Metrics

struct LevelMetrics {
    std::string label;
    double mae = 0.0, rmse = 0.0, sp_rmse = 0.0, psnr = 0.0;
};

/// Generated volumes are clipped at zero before scoring.
inline LevelMetrics score_level(const Grid& pred, const Grid& truth, double peak) {
    Grid p = pred;
    for (double& v : p.values()) v = std::max(v, 0.0);
    p.set_origin(truth.origin());
    return {truth.level().label, mae(p, truth), rmse(p, truth), sp_rmse(p, truth), psnr(p, truth, peak)};
}

/// Per-level means over windows for one sampling seed.
struct EvalResult {
    std::vector<LevelMetrics> levels;  // coarse to fine
    double sample_seconds = 0.0;       // per window
    std::size_t forward_passes = 0;    // per window
};

inline std::vector<const Sample*> eval_windows(const ExperimentConfig& cfg, const Dataset& data) {
    std::vector<const Sample*> out;
    for (const auto& s : data.validation) {
        if (cfg.max_samples > 0 && static_cast<int>(out.size()) >= cfg.max_samples) break;
        out.push_back(&s);
    }
    return out;
}

inline EvalResult evaluate(const nn::Denoiser& net, const ExperimentConfig& cfg, const Dataset& data,
                           std::uint64_t seed, bool true_priors = false) {
    const auto plan = cfg.build_plan();
    const Normalizer norm{data.city.psnr_peak};
    const auto windows = eval_windows(cfg, data);
    EvalResult r;
    r.levels.resize(static_cast<std::size_t>(plan.K()));
    const std::size_t calls0 = net.forward_calls;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto truth = stage_ladder(windows[i]->fine, plan);
        SampleOptions so;
        so.seed = combine(seed, i);
        if (true_priors) so.true_priors = &truth;
        const auto res = rrdp_sample(net, windows[i]->cond, plan, cfg.spec, norm, so);
        for (int k = 0; k < plan.K(); ++k) {
            const auto& t = truth.levels[static_cast<std::size_t>(k)];
            const auto m = score_level(res.ladder.levels[static_cast<std::size_t>(k)], t,
                                       data.city.psnr_peak * t.level().block_cells());
            auto& acc = r.levels[static_cast<std::size_t>(k)];
            acc.label = m.label;
            acc.mae += m.mae / windows.size();
            acc.rmse += m.rmse / windows.size();
            acc.sp_rmse += m.sp_rmse / windows.size();
            acc.psnr += m.psnr / windows.size();
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!windows.empty()) {
        r.sample_seconds = secs / windows.size();
        r.forward_passes = (net.forward_calls - calls0) / windows.size();
    }
    return r;
}

/// Per-level rows aggregated over seeds (mean and unbiased sample variance).
struct MetricsReport {
    static constexpr const char* kSchema = "drdm-metrics-v1";
    struct Row {
        int level = 0;
        std::string label;
        double mae = 0, rmse = 0, sp_rmse = 0, psnr = 0;
        double mae_var = 0, rmse_var = 0, sp_rmse_var = 0, psnr_var = 0;
    };
    std::vector<Row> rows;
    std::size_t seeds = 0;
    double train_seconds_per_epoch = 0.0;
    double sample_seconds_per_run = 0.0;
    std::size_t forward_passes_per_run = 0;

    static MetricsReport aggregate(const std::vector<EvalResult>& runs) {
        MetricsReport rep;
        rep.seeds = runs.size();
        if (runs.empty()) return rep;
        const std::size_t L = runs.front().levels.size();
        auto stats = [&](std::size_t l, double LevelMetrics::*f, double& mean, double& var) {
            mean = 0.0;
            for (const auto& r : runs) mean += r.levels[l].*f / runs.size();
            var = 0.0;
            if (runs.size() > 1) {
                for (const auto& r : runs) var += (r.levels[l].*f - mean) * (r.levels[l].*f - mean);
                var /= static_cast<double>(runs.size() - 1);
            }
        };
        for (std::size_t l = 0; l < L; ++l) {
            Row row;
            row.level = static_cast<int>(l) + 1;
            row.label = runs.front().levels[l].label;
            stats(l, &LevelMetrics::mae, row.mae, row.mae_var);
            stats(l, &LevelMetrics::rmse, row.rmse, row.rmse_var);
            stats(l, &LevelMetrics::sp_rmse, row.sp_rmse, row.sp_rmse_var);
            stats(l, &LevelMetrics::psnr, row.psnr, row.psnr_var);
            rep.rows.push_back(row);
        }
        for (const auto& r : runs) {
            rep.sample_seconds_per_run += r.sample_seconds / runs.size();
            rep.forward_passes_per_run = r.forward_passes;
        }
        return rep;
    }

    static std::string header() {
        return "schema,level,label,mae,rmse,sp_rmse,psnr,mae_var,rmse_var,sp_rmse_var,psnr_var,seeds";
    }

    std::string csv() const {
        std::ostringstream os;
        os.precision(9);
        os << header() << '\n';
        for (const auto& r : rows)
            os << kSchema << ',' << r.level << ',' << r.label << ',' << r.mae << ',' << r.rmse << ',' << r.sp_rmse << ','
               << r.psnr << ',' << r.mae_var << ',' << r.rmse_var << ',' << r.sp_rmse_var << ',' << r.psnr_var << ','
               << seeds << '\n';
        return os.str();
    }

    std::string runtime_csv() const {
        std::ostringstream os;
        os.precision(9);
        os << "schema,train_s_per_epoch,sample_s_per_run,forward_passes_per_run,seeds\n";
        os << kSchema << ',' << train_seconds_per_epoch << ',' << sample_seconds_per_run << ',' << forward_passes_per_run
           << ',' << seeds << '\n';
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Bundled runs

inline nlohmann::json levels_json(const RGPPlan& plan) {
    auto arr = nlohmann::json::array();
    for (const auto& l : plan.stages) arr.push_back({{"label", l.label}, {"spatial", l.spatial}, {"temporal", l.temporal}});
    return arr;
}

inline std::vector<ResolutionLevel> levels_from_json(const nlohmann::json& j) {
    std::vector<ResolutionLevel> out;
    int idx = 1;
    for (const auto& e : j) out.push_back({idx++, e.at("spatial").get<int>(), e.at("temporal").get<int>(), e.at("label").get<std::string>()});
    return out;
}

/// Samples every evaluation window; tensors pred/<i>/<label> and truth/<i>/<label>.
inline TensorBundle sample_bundle(const nn::Denoiser& net, const ExperimentConfig& cfg, const Dataset& data,
                                  std::uint64_t seed, std::ostream* trace = nullptr) {
    const auto plan = cfg.build_plan();
    const Normalizer norm{data.city.psnr_peak};
    TensorBundle b;
    auto windows = nlohmann::json::array();
    const std::size_t calls0 = net.forward_calls;
    const auto ws = eval_windows(cfg, data);
    if (trace) trace_header(*trace);
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const auto truth = stage_ladder(ws[i]->fine, plan);
        SampleOptions so;
        so.seed = combine(seed, i);
        so.trace = trace;
        if (cfg.true_priors) so.true_priors = &truth;
        const auto res = rrdp_sample(net, ws[i]->cond, plan, cfg.spec, norm, so);
        for (int k = 0; k < plan.K(); ++k) {
            const auto& label = plan.level(k + 1).label;
            b.add("pred/" + std::to_string(i) + "/" + label, res.ladder.levels[static_cast<std::size_t>(k)]);
            b.add("truth/" + std::to_string(i) + "/" + label, truth.levels[static_cast<std::size_t>(k)]);
        }
        const auto& o = ws[i]->fine.origin();
        windows.push_back({o.t0, o.i0, o.j0});
    }
    b.metadata["kind"] = "samples";
    b.metadata["seed"] = seed;
    b.metadata["psnr_peak"] = data.city.psnr_peak;
    b.metadata["levels"] = levels_json(plan);
    b.metadata["windows"] = windows;
    b.metadata["forward_passes"] = ws.empty() ? 0 : (net.forward_calls - calls0) / ws.size();
    b.metadata["true_priors"] = cfg.true_priors;
    return b;
}

/// Scores pred/<i>/<label> against truth/<i>/<label>, taken from `truth` when
/// given, otherwise from the same bundle.
inline EvalResult evaluate_bundle(const TensorBundle& generated, const TensorBundle* truth = nullptr) {
    if (!generated.metadata.contains("levels") || !generated.metadata.contains("windows"))
        throw BundleError(BundleError::Code::malformed, "bundle is not a samples bundle");
    const auto levels = levels_from_json(generated.metadata["levels"]);
    const std::size_t n = generated.metadata["windows"].size();
    const double peak = generated.metadata.value("psnr_peak", 1.0);
    const TensorBundle& tb = truth ? *truth : generated;
    EvalResult r;
    r.levels.resize(levels.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < levels.size(); ++k) {
            const std::string key = std::to_string(i) + "/" + levels[k].label;
            const auto p = generated.grid("pred/" + key, levels[k]);
            const auto t = tb.grid("truth/" + key, levels[k]);
            const auto m = score_level(p, t, peak * levels[k].block_cells());
            auto& acc = r.levels[k];
            acc.label = m.label;
            acc.mae += m.mae / n;
            acc.rmse += m.rmse / n;
            acc.sp_rmse += m.sp_rmse / n;
            acc.psnr += m.psnr / n;
        }
    r.forward_passes = generated.metadata.value("forward_passes", std::size_t{0});
    return r;
}

/// Refines the coarse fields <prefix><i>/<label> of a samples bundle down to
/// the finest stage. Output tensors refined/<i>, plus truth/<i>/<finest label>.
inline TensorBundle refine_bundle(const nn::Denoiser& net, const ExperimentConfig& cfg, const Dataset& data,
                                  const TensorBundle& coarse, const std::string& label, std::uint64_t seed,
                                  const std::string& prefix = "truth/") {
    const auto plan = cfg.build_plan();
    const Normalizer norm{data.city.psnr_peak};
    int j = 0;
    for (int k = 1; k <= plan.K(); ++k)
        if (plan.level(k).label == label) j = k;
    if (j == 0) throw ConfigError("refine: level '" + label + "' is not a stage of the plan");
    const auto ws = eval_windows(cfg, data);
    if (!coarse.metadata.contains("windows") || coarse.metadata["windows"].size() != ws.size())
        throw BundleError(BundleError::Code::malformed, "refine: coarse bundle windows do not match the evaluation set");
    TensorBundle out;
    const auto& fine_label = plan.level(plan.K()).label;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const auto c = coarse.grid(prefix + std::to_string(i) + "/" + label, plan.level(j));
        SampleOptions so;
        so.seed = combine(seed, i);
        const auto g = refine_zero_shot(net, c, ws[i]->cond, plan, cfg.spec, norm, so);
        out.add("refined/" + std::to_string(i), g);
        out.add("truth/" + std::to_string(i) + "/" + fine_label, stage_ladder(ws[i]->fine, plan).levels.back());
    }
    out.metadata["kind"] = "refined";
    out.metadata["seed"] = seed;
    out.metadata["from_level"] = label;
    out.metadata["windows"] = coarse.metadata["windows"];
    return out;
}

/// CSV of the schedule over every global step: n,k,m,beta,alpha,sigma.
inline std::string schedule_csv(const RGPPlan& plan, const ScheduleSpec& spec) {
    std::ostringstream os;
    os.precision(12);
    os << "n,k,m,beta,alpha,sigma\n";
    for (int n = plan.N; n >= 0; --n) {
        const auto [k, m] = local_step(plan, n);
        os << n << ',' << k << ',' << m << ',' << beta_local(plan, spec, k, m) << ',' << alpha_local(plan, spec, k, m)
           << ',' << (m >= 1 ? sigma_local(plan, spec, k, m) : 0.0) << '\n';
    }
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

} // namespace drdm
