#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "drdm/bundle.hpp"
#include "drdm/config.hpp"
#include "drdm/grid.hpp"
#include "drdm/rng.hpp"

namespace drdm {

/// Parses "label:spatial:temporal,..." (coarsest first).
inline std::vector<ResolutionLevel> parse_ladder(const std::string& text) {
    std::vector<ResolutionLevel> out;
    for (const auto& item : KeyValues::split(text, ',')) {
        auto parts = KeyValues::split(item, ':');
        if (parts.size() != 3) throw ConfigError("ladder: expected label:spatial:temporal, got '" + item + "'");
        ResolutionLevel lvl;
        lvl.label = parts[0];
        try {
            lvl.spatial = std::stoi(parts[1]);
            lvl.temporal = std::stoi(parts[2]);
        } catch (const std::exception&) {
            throw ConfigError("ladder: non-integer factor in '" + item + "'");
        }
        lvl.index = static_cast<int>(out.size()) + 1;
        out.push_back(lvl);
    }
    return out;
}

inline std::string format_ladder(const std::vector<ResolutionLevel>& levels) {
    std::string s;
    for (std::size_t i = 0; i < levels.size(); ++i)
        s += (i ? "," : "") + levels[i].label + ":" + std::to_string(levels[i].spatial) + ":" +
             std::to_string(levels[i].temporal);
    return s;
}

/// Throws unless `levels` is a valid coarse-to-fine ladder ending at (1,1)
/// whose factors divide the given finest extent.
inline void validate_ladder(const std::vector<ResolutionLevel>& levels, const Extent& fine) {
    if (levels.size() < 2) throw ShapeError("ladder: need K >= 2 levels, got " + std::to_string(levels.size()));
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const auto& l = levels[k];
        if (l.spatial < 1 || l.temporal < 1) throw ShapeError("ladder: factors must be >= 1 at level " + l.label);
        if (fine.t % l.temporal) throw ShapeError("ladder: temporal factor " + std::to_string(l.temporal) + " of level " + l.label + " does not divide T=" + std::to_string(fine.t));
        if (fine.h % l.spatial) throw ShapeError("ladder: spatial factor " + std::to_string(l.spatial) + " of level " + l.label + " does not divide H=" + std::to_string(fine.h));
        if (fine.w % l.spatial) throw ShapeError("ladder: spatial factor " + std::to_string(l.spatial) + " of level " + l.label + " does not divide W=" + std::to_string(fine.w));
        if (k > 0) {
            const auto& p = levels[k - 1];
            if (l.spatial > p.spatial || l.temporal > p.temporal)
                throw ShapeError("ladder: level " + l.label + " is coarser than its predecessor " + p.label);
            if (p.spatial % l.spatial || p.temporal % l.temporal)
                throw ShapeError("ladder: level " + p.label + " is not an integer coarsening of " + l.label);
        }
    }
    if (levels.back().spatial != 1 || levels.back().temporal != 1)
        throw ShapeError("ladder: finest level must have factors (1,1)");
}

/// Sum-aggregates the finest grid onto every requested level.
inline MultiScaleTraffic build_ladder(const Grid& fine, const std::vector<ResolutionLevel>& spec) {
    validate_ladder(spec, fine.extent());
    MultiScaleTraffic out;
    for (std::size_t k = 0; k < spec.size(); ++k) {
        Grid g = coarsen(fine, spec[k].temporal, spec[k].spatial, CoarsenMode::sum);
        g.level() = spec[k];
        g.level().index = static_cast<int>(k) + 1;
        out.levels.push_back(std::move(g));
    }
    return out;
}

/// Crops the block of `g` covering the finest-unit window [origin, origin+fine_extent).
inline Grid crop(const Grid& g, Origin origin, Extent fine_extent) {
    const int s = g.level().spatial, tt = g.level().temporal;
    if (origin.t0 % tt || origin.i0 % s || origin.j0 % s || fine_extent.t % tt || fine_extent.h % s || fine_extent.w % s)
        throw ShapeError("crop: window not aligned to level " + g.level().label);
    const int lt0 = (origin.t0 - g.origin().t0) / tt, li0 = (origin.i0 - g.origin().i0) / s,
              lj0 = (origin.j0 - g.origin().j0) / s;
    Extent e{fine_extent.t / tt, fine_extent.h / s, fine_extent.w / s};
    if (lt0 < 0 || li0 < 0 || lj0 < 0 || lt0 + e.t > g.T() || li0 + e.h > g.H() || lj0 + e.w > g.W())
        throw ShapeError("crop: window outside grid");
    Grid out(g.level(), e, 0.0, origin);
    for (int t = 0; t < e.t; ++t)
        for (int i = 0; i < e.h; ++i)
            for (int j = 0; j < e.w; ++j) out(t, i, j) = g(lt0 + t, li0 + i, lj0 + j);
    return out;
}

inline MultiScaleTraffic crop(const MultiScaleTraffic& ladder, Origin origin, Extent fine_extent) {
    MultiScaleTraffic out;
    for (const auto& g : ladder.levels) out.levels.push_back(crop(g, origin, fine_extent));
    return out;
}

/// Generator knobs. Keys of the plain-text form are listed in `keys()`.
struct CityConfig {
    int h_fine = 32;
    int w_fine = 32;
    int t_fine = 48;
    std::vector<ResolutionLevel> ladder = parse_ladder("bs:8:4,cell:4:2,grid100:2:1,grid50:1:1");
    int aoi_classes = 4;
    int surface_classes = 3;
    int poi_dim = 8;
    int aoi_rects = 10;
    double period = 24.0;
    // softplus(w1 * population + w2 * poi_intensity + w3 * surface_factor + noise)
    std::vector<double> weights = {2.0, 1.5, 0.5};
    // Diurnal amplitude per AoI class.
    std::vector<double> amplitudes = {0.3, 0.8, 0.6, 0.9};
    double noise = 0.05;
    int tile = 8;
    double val_fraction = 0.25;
    std::uint64_t seed = 0;

    static std::set<std::string> keys() {
        return {"h_fine", "w_fine", "t_fine", "ladder", "aoi_classes", "surface_classes", "poi_dim", "aoi_rects",
                "period", "weights", "amplitudes", "noise", "tile", "val_fraction", "seed"};
    }

    static CityConfig from(const KeyValues& kv, const std::string& prefix = "") {
        CityConfig c;
        std::vector<std::string> problems;
        auto key = [&](const char* k) { return prefix + k; };
        c.h_fine = int(kv.integer(key("h_fine"), c.h_fine, problems));
        c.w_fine = int(kv.integer(key("w_fine"), c.w_fine, problems));
        c.t_fine = int(kv.integer(key("t_fine"), c.t_fine, problems));
        if (kv.has(key("ladder"))) {
            try {
                c.ladder = parse_ladder(kv.str(key("ladder"), ""));
            } catch (const ConfigError& e) {
                problems.push_back(key("ladder") + ": " + e.what());
            }
        }
        c.aoi_classes = int(kv.integer(key("aoi_classes"), c.aoi_classes, problems));
        c.surface_classes = int(kv.integer(key("surface_classes"), c.surface_classes, problems));
        c.poi_dim = int(kv.integer(key("poi_dim"), c.poi_dim, problems));
        c.aoi_rects = int(kv.integer(key("aoi_rects"), c.aoi_rects, problems));
        c.period = kv.real(key("period"), c.period, problems);
        c.weights = kv.reals(key("weights"), c.weights, problems);
        c.amplitudes = kv.reals(key("amplitudes"), c.amplitudes, problems);
        c.noise = kv.real(key("noise"), c.noise, problems);
        c.tile = int(kv.integer(key("tile"), c.tile, problems));
        c.val_fraction = kv.real(key("val_fraction"), c.val_fraction, problems);
        c.seed = static_cast<std::uint64_t>(kv.integer(key("seed"), static_cast<long long>(c.seed), problems));
        auto more = c.validation_problems(prefix);
        problems.insert(problems.end(), more.begin(), more.end());
        if (!problems.empty()) throw ConfigError(KeyValues::join(problems, "; "));
        return c;
    }

    std::vector<std::string> validation_problems(const std::string& prefix = "") const {
        std::vector<std::string> p;
        if (h_fine < 1 || w_fine < 1 || t_fine < 1) p.push_back(prefix + "h_fine/w_fine/t_fine: must be positive");
        if (aoi_classes < 1) p.push_back(prefix + "aoi_classes: must be >= 1");
        if (surface_classes < 2) p.push_back(prefix + "surface_classes: must be >= 2");
        if (poi_dim < 1) p.push_back(prefix + "poi_dim: must be >= 1");
        if (weights.size() != 3) p.push_back(prefix + "weights: expected 3 values");
        if (static_cast<int>(amplitudes.size()) != aoi_classes)
            p.push_back(prefix + "amplitudes: expected one value per AoI class (" + std::to_string(aoi_classes) + ")");
        for (double a : amplitudes)
            if (a < 0.0 || a >= 1.0) p.push_back(prefix + "amplitudes: values must lie in [0, 1)");
        if (tile < 1 || h_fine % tile || w_fine % tile) p.push_back(prefix + "tile: must divide h_fine and w_fine");
        if (period <= 0.0) p.push_back(prefix + "period: must be positive");
        try {
            validate_ladder(ladder, Extent{t_fine, h_fine, w_fine});
        } catch (const Error& e) {
            p.push_back(prefix + "ladder: " + e.what());
        }
        return p;
    }

    KeyValues to_key_values() const {
        KeyValues kv;
        auto list = [](const std::vector<double>& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) {
                std::ostringstream os;
                os.precision(17);
                os << v[i];
                s += (i ? "," : "") + os.str();
            }
            return s;
        };
        kv.set("h_fine", std::to_string(h_fine));
        kv.set("w_fine", std::to_string(w_fine));
        kv.set("t_fine", std::to_string(t_fine));
        kv.set("ladder", format_ladder(ladder));
        kv.set("aoi_classes", std::to_string(aoi_classes));
        kv.set("surface_classes", std::to_string(surface_classes));
        kv.set("poi_dim", std::to_string(poi_dim));
        kv.set("aoi_rects", std::to_string(aoi_rects));
        kv.set("period", list({period}));
        kv.set("weights", list(weights));
        kv.set("amplitudes", list(amplitudes));
        kv.set("noise", list({noise}));
        kv.set("tile", std::to_string(tile));
        kv.set("val_fraction", list({val_fraction}));
        kv.set("seed", std::to_string(seed));
        return kv;
    }
};

/// The four conditioning fields at the finest resolution.
struct UrbanContext {
    int h = 0, w = 0, t = 0;
    int surface_classes = 0, aoi_classes = 0, poi_dim = 0;
    std::vector<int> surface;        // H x W
    std::vector<int> aoi;            // H x W
    std::vector<double> poi;         // d x H x W
    std::vector<double> population;  // T x H x W, already divided by pop_scale

    std::size_t cell(int i, int j) const { return static_cast<std::size_t>(i) * w + j; }
    double poi_at(int c, int i, int j) const { return poi[(static_cast<std::size_t>(c) * h + i) * w + j]; }
    double pop_at(int tt, int i, int j) const { return population[(static_cast<std::size_t>(tt) * h + i) * w + j]; }
};

struct SyntheticCity {
    CityConfig config;
    UrbanContext context;
    MultiScaleTraffic traffic;
    std::uint64_t seed = 0;
    double psnr_peak = 1.0;

    Extent fine_extent() const { return traffic.finest().extent(); }
};

namespace detail {

inline std::vector<double> box_blur(const std::vector<double>& f, int h, int w, int radius) {
    std::vector<double> out(f.size(), 0.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double acc = 0.0;
            int n = 0;
            for (int di = -radius; di <= radius; ++di)
                for (int dj = -radius; dj <= radius; ++dj) {
                    const int a = i + di, b = j + dj;
                    if (a < 0 || b < 0 || a >= h || b >= w) continue;
                    acc += f[static_cast<std::size_t>(a) * w + b];
                    ++n;
                }
            out[static_cast<std::size_t>(i) * w + j] = acc / n;
        }
    return out;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

} // namespace detail

/// Surface class -> additive traffic factor (building, road, open, ...).
inline double surface_factor(int cls, int n_classes) {
    if (cls == 0) return 1.0;
    if (cls == 1) return 0.5;
    return n_classes > 2 ? 0.25 * (cls - 2) / std::max(1, n_classes - 3) : 0.0;
}

/// Deterministic synthetic city. Each field draws from its own named substream
/// of `seed` so adding a field never shifts the others.
///
/// AoI: background class 0 plus `aoi_rects` random rectangles of random class.
/// Population: per-AoI diurnal profile 1 + a_c sin(2 pi t / period + phi_c)
/// times a blurred spatial density. Finest traffic:
/// softplus(w1 pop + w2 poi_intensity + w3 surface_factor + noise z_ij) where
/// z_ij is a static per-cell standard normal.
inline SyntheticCity generate_city(const CityConfig& config, std::uint64_t seed) {
    if (auto p = config.validation_problems(); !p.empty()) throw ConfigError(KeyValues::join(p, "; "));
    const int H = config.h_fine, W = config.w_fine, T = config.t_fine;
    const std::size_t HW = static_cast<std::size_t>(H) * W;

    SyntheticCity city;
    city.config = config;
    city.seed = seed;
    UrbanContext& ctx = city.context;
    ctx.h = H;
    ctx.w = W;
    ctx.t = T;
    ctx.surface_classes = config.surface_classes;
    ctx.aoi_classes = config.aoi_classes;
    ctx.poi_dim = config.poi_dim;

    // AoI rectangles and per-class phases.
    RngStream aoi_rng(seed, "aoi");
    ctx.aoi.assign(HW, 0);
    for (int r = 0; r < config.aoi_rects && config.aoi_classes > 1; ++r) {
        const int rh = aoi_rng.uniform_int(std::max(1, H / 8), std::max(2, H / 3 + 1));
        const int rw = aoi_rng.uniform_int(std::max(1, W / 8), std::max(2, W / 3 + 1));
        const int i0 = aoi_rng.uniform_int(0, std::max(1, H - rh + 1));
        const int j0 = aoi_rng.uniform_int(0, std::max(1, W - rw + 1));
        const int cls = aoi_rng.uniform_int(1, config.aoi_classes);
        for (int i = i0; i < std::min(H, i0 + rh); ++i)
            for (int j = j0; j < std::min(W, j0 + rw); ++j) ctx.aoi[static_cast<std::size_t>(i) * W + j] = cls;
    }
    RngStream phase_rng(seed, "aoi-phase");
    std::vector<double> phase(config.aoi_classes);
    for (auto& p : phase) p = phase_rng.uniform(0.0, 2.0 * std::numbers::pi);

    // Surface: buildings / open land with a few straight roads.
    RngStream surf_rng(seed, "surface");
    ctx.surface.assign(HW, 0);
    for (std::size_t c = 0; c < HW; ++c) {
        if (surf_rng.uniform() < 0.25) ctx.surface[c] = config.surface_classes > 2 ? surf_rng.uniform_int(2, config.surface_classes) : 0;
    }
    const int roads = std::max(1, (H + W) / 16);
    for (int r = 0; r < roads; ++r) {
        const bool horizontal = surf_rng.uniform() < 0.5;
        const int at = surf_rng.uniform_int(0, horizontal ? H : W);
        for (int x = 0; x < (horizontal ? W : H); ++x) {
            const int i = horizontal ? at : x, j = horizontal ? x : at;
            ctx.surface[static_cast<std::size_t>(i) * W + j] = 1;
        }
    }

    // POI channels: blurred sparse positive fields.
    RngStream poi_rng(seed, "poi");
    ctx.poi.assign(static_cast<std::size_t>(config.poi_dim) * HW, 0.0);
    std::vector<double> poi_intensity(HW, 0.0);
    for (int c = 0; c < config.poi_dim; ++c) {
        std::vector<double> raw(HW);
        for (auto& v : raw) {
            const double u = poi_rng.uniform();
            v = u * u * u;
        }
        auto sm = detail::box_blur(raw, H, W, 1);
        for (std::size_t k = 0; k < HW; ++k) {
            ctx.poi[c * HW + k] = sm[k];
            poi_intensity[k] += sm[k] / config.poi_dim;
        }
    }
    double pmax = 0.0;
    for (double v : poi_intensity) pmax = std::max(pmax, v);
    for (double& v : poi_intensity) v /= pmax > 0 ? pmax : 1.0;

    // Population = diurnal profile of the cell's AoI x smoothed density.
    RngStream pop_rng(seed, "population");
    std::vector<double> density(HW);
    for (auto& v : density) v = pop_rng.uniform(0.2, 1.0);
    density = detail::box_blur(density, H, W, 2);
    ctx.population.assign(static_cast<std::size_t>(T) * HW, 0.0);
    for (int t = 0; t < T; ++t)
        for (std::size_t k = 0; k < HW; ++k) {
            const int cls = ctx.aoi[k];
            const double prof =
                1.0 + config.amplitudes[cls] * std::sin(2.0 * std::numbers::pi * t / config.period + phase[cls]);
            ctx.population[t * HW + k] = prof * density[k];
        }

    // Static per-cell noise.
    RngStream noise_rng(seed, "noise");
    std::vector<double> z(HW);
    for (auto& v : z) v = noise_rng.normal();

    ResolutionLevel finest{static_cast<int>(config.ladder.size()), 1, 1, config.ladder.back().label};
    Grid fine(finest, Extent{T, H, W});
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * W + j;
                const double drive = config.weights[0] * ctx.population[t * HW + k] +
                                     config.weights[1] * poi_intensity[k] +
                                     config.weights[2] * surface_factor(ctx.surface[k], config.surface_classes) +
                                     config.noise * z[k];
                fine(t, i, j) = detail::softplus(drive);
            }
    city.traffic = build_ladder(fine, config.ladder);
    city.psnr_peak = 0.0;
    for (double v : fine.values()) city.psnr_peak = std::max(city.psnr_peak, v);
    return city;
}

struct TileSplit {
    std::vector<Origin> train;
    std::vector<Origin> validation;
};

/// Disjoint tile x tile spatial patches, a seeded fraction held out.
inline TileSplit split_tiles(const CityConfig& config, std::uint64_t seed) {
    std::vector<Origin> all;
    for (int i = 0; i < config.h_fine; i += config.tile)
        for (int j = 0; j < config.w_fine; j += config.tile) all.push_back(Origin{0, i, j});
    RngStream rng(seed, "tile-split");
    for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.uniform_int(0, static_cast<int>(i))]);
    const auto n_val = static_cast<std::size_t>(std::lround(config.val_fraction * all.size()));
    TileSplit s;
    s.validation.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
    auto by_pos = [](const Origin& a, const Origin& b) { return a.i0 != b.i0 ? a.i0 < b.i0 : a.j0 < b.j0; };
    std::sort(s.validation.begin(), s.validation.end(), by_pos);
    std::sort(s.train.begin(), s.train.end(), by_pos);
    return s;
}

inline TensorBundle city_to_bundle(const SyntheticCity& city) {
    TensorBundle b;
    const auto& c = city.context;
    auto ints = [](const std::vector<int>& v) { return std::vector<double>(v.begin(), v.end()); };
    b.add("context/surface", {c.h, c.w}, ints(c.surface));
    b.add("context/aoi", {c.h, c.w}, ints(c.aoi));
    b.add("context/poi", {c.poi_dim, c.h, c.w}, c.poi);
    b.add("context/population", {c.t, c.h, c.w}, c.population);
    for (const auto& g : city.traffic.levels) b.add("traffic/" + g.level().label, g);
    b.metadata["kind"] = "city";
    b.metadata["config"] = city.config.to_key_values().dump();
    b.metadata["seed"] = city.seed;
    b.metadata["psnr_peak"] = city.psnr_peak;
    b.metadata["ladder"] = format_ladder(city.config.ladder);
    return b;
}

/// Restores a city from its bundle. Traffic values come back as stored (f32).
inline SyntheticCity city_from_bundle(const TensorBundle& b) {
    if (!b.metadata.contains("config")) throw BundleError(BundleError::Code::malformed, "bundle: not a city bundle");
    SyntheticCity city;
    city.config = CityConfig::from(KeyValues::parse(b.metadata["config"].get<std::string>(), "bundle-config"));
    city.seed = b.metadata.value("seed", std::uint64_t{0});
    city.psnr_peak = b.metadata.value("psnr_peak", 1.0);
    auto& c = city.context;
    c.h = city.config.h_fine;
    c.w = city.config.w_fine;
    c.t = city.config.t_fine;
    c.surface_classes = city.config.surface_classes;
    c.aoi_classes = city.config.aoi_classes;
    c.poi_dim = city.config.poi_dim;
    auto to_int = [](const std::vector<double>& v) {
        std::vector<int> out;
        for (double x : v) out.push_back(static_cast<int>(std::lround(x)));
        return out;
    };
    c.surface = to_int(b.values("context/surface"));
    c.aoi = to_int(b.values("context/aoi"));
    c.poi = b.values("context/poi");
    c.population = b.values("context/population");
    for (std::size_t k = 0; k < city.config.ladder.size(); ++k) {
        auto lvl = city.config.ladder[k];
        lvl.index = static_cast<int>(k) + 1;
        city.traffic.levels.push_back(b.grid("traffic/" + lvl.label, lvl));
    }
    return city;
}

} // namespace drdm
