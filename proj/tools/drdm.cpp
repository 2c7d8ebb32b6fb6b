// drdm command-line front end.
//
//   drdm synth|train|sample|eval|refine|schedule|gradcheck --config <file>... [--set key=value]... [--seed k] [--seeds a,b,c] [--out dir]
//
// Exit codes: 0 ok, 1 user error (config, files, usage), 2 internal error.
// Failures print one line to stderr: error: kind=<kind> message=<text>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "drdm/experiment.hpp"
#include "drdm/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace drdm;

namespace {

struct Options {
    std::string command;
    std::vector<std::string> configs;
    std::vector<std::string> overrides;
    std::optional<long long> seed;
    std::string seeds;
    std::string out;
    std::string checkpoint;
    std::string generated;
    std::string truth;
    std::string coarse;
    std::string level;
    std::string coarse_prefix = "truth/";
};

struct Context {
    ExperimentConfig cfg;
    fs::path out;
    std::vector<std::uint64_t> seeds;
};

std::string seeds_text(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
    return s;
}

Context resolve(const Options& o) {
    KeyValues kv;
    for (const auto& path : o.configs) {
        const auto file = KeyValues::load(path);
        for (const auto& [k, v] : file.entries()) kv.set(k, v);
    }
    for (const auto& ov : o.overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + ov + "'");
        kv.set(KeyValues::trim(ov.substr(0, eq)), KeyValues::trim(ov.substr(eq + 1)));
    }
    if (!o.out.empty()) kv.set("output.dir", o.out);
    Context c{ExperimentConfig::from(kv), {}, {}};
    c.out = c.cfg.output_dir;
    if (!o.seeds.empty()) {
        for (int s : parse_ints(o.seeds)) c.seeds.push_back(static_cast<std::uint64_t>(s));
    } else if (o.seed) {
        c.seeds.push_back(static_cast<std::uint64_t>(*o.seed));
    } else {
        c.seeds.push_back(c.cfg.train.seed);
    }
    for (auto s : c.seeds)
        if (static_cast<long long>(s) < 0) throw ConfigError("seeds must be non-negative");
    fs::create_directories(c.out);
    std::string snapshot = "# drdm " + o.command + " seeds=" + seeds_text(c.seeds) + "\n" + c.cfg.resolved().dump();
    write_text(c.out / ("resolved_" + o.command + ".cfg"), snapshot);
    return c;
}

fs::path seed_dir(const Context& c, const std::string& stem, std::uint64_t seed) {
    return c.seeds.size() > 1 ? c.out / (stem + "_seed" + std::to_string(seed)) : c.out / stem;
}

bool tracing() {
    const char* v = std::getenv("DRDM_TRACE");
    return v && std::string(v) == "1";
}

Dataset dataset_for(const Context& c) { return make_dataset(c.cfg, load_or_generate_city(c.cfg)); }

int cmd_synth(const Options& o) {
    auto c = resolve(o);
    for (auto seed : c.seeds) {
        auto city = generate_city(c.cfg.city, o.seed || !o.seeds.empty() ? seed : c.cfg.city.seed);
        save_bundle(city_to_bundle(city), seed_dir(c, "city", seed));
    }
    return 0;
}

int cmd_train(const Options& o) {
    auto c = resolve(o);
    const auto data = dataset_for(c);
    for (auto seed : c.seeds) {
        auto m = train_model(c.cfg, data, seed);
        const auto dir = seed_dir(c, "checkpoint", seed);
        save_bundle(checkpoint_bundle(m.net, c.cfg, seed), dir);
        std::ostringstream os;
        os << "epoch,loss\n";
        for (std::size_t e = 0; e < m.losses.size(); ++e) os << e + 1 << ',' << m.losses[e] << '\n';
        write_text(dir / "losses.csv", os.str());
        std::cout << "trained seed " << seed << " in " << m.seconds << " s -> " << dir.string() << "\n";
    }
    return 0;
}

fs::path checkpoint_for(const Options& o, const Context& c, std::uint64_t seed) {
    if (o.checkpoint.empty()) return seed_dir(c, "checkpoint", seed);
    if (c.seeds.size() > 1) return fs::path(o.checkpoint + "_seed" + std::to_string(seed));
    return o.checkpoint;
}

int cmd_sample(const Options& o) {
    auto c = resolve(o);
    const auto data = dataset_for(c);
    for (auto seed : c.seeds) {
        const auto net = load_checkpoint(load_bundle(checkpoint_for(o, c, seed)), c.cfg);
        std::ofstream trace;
        if (tracing()) trace.open(seed_dir(c, "trace", seed).string() + ".csv");
        const auto b = sample_bundle(net, c.cfg, data, seed, trace.is_open() ? &trace : nullptr);
        save_bundle(b, seed_dir(c, "samples", seed));
    }
    return 0;
}

void write_report(const Context& c, MetricsReport rep) {
    write_text(c.out / "metrics.csv", rep.csv());
    write_text(c.out / "runtime.csv", rep.runtime_csv());
    std::cout << rep.csv();
}

int cmd_eval(const Options& o) {
    auto c = resolve(o);
    std::vector<EvalResult> runs;
    MetricsReport rep;
    if (!o.generated.empty()) {
        std::optional<TensorBundle> truth;
        if (!o.truth.empty()) truth = load_bundle(o.truth);
        for (const auto& path : KeyValues::split(o.generated, ','))
            runs.push_back(evaluate_bundle(load_bundle(path), truth ? &*truth : nullptr));
        rep = MetricsReport::aggregate(runs);
    } else {
        // Full pipeline per seed: train, sample the held-out windows, score.
        const auto data = dataset_for(c);
        double train_s = 0.0;
        for (auto seed : c.seeds) {
            auto m = train_model(c.cfg, data, seed);
            train_s += c.cfg.train.epochs > 0 ? m.seconds / c.cfg.train.epochs : 0.0;
            runs.push_back(evaluate(m.net, c.cfg, data, seed, c.cfg.true_priors));
        }
        rep = MetricsReport::aggregate(runs);
        rep.train_seconds_per_epoch = train_s / c.seeds.size();
    }
    write_report(c, rep);
    return 0;
}

int cmd_refine(const Options& o) {
    if (o.coarse.empty() || o.level.empty()) throw ConfigError("refine needs --coarse <bundle> and --level <label>");
    auto c = resolve(o);
    const auto data = dataset_for(c);
    const auto coarse = load_bundle(o.coarse);
    for (auto seed : c.seeds) {
        const auto net = load_checkpoint(load_bundle(checkpoint_for(o, c, seed)), c.cfg);
        save_bundle(refine_bundle(net, c.cfg, data, coarse, o.level, seed, o.coarse_prefix), seed_dir(c, "refined", seed));
    }
    return 0;
}

int cmd_schedule(const Options& o) {
    auto c = resolve(o);
    write_text(c.out / "schedule.csv", schedule_csv(c.cfg.build_plan(), c.cfg.spec));
    return 0;
}

int cmd_gradcheck(const Options& o) {
    auto c = resolve(o);
    std::ostringstream os;
    os << "seed,block,size,rel_error\n";
    double worst = 0.0;
    for (auto seed : c.seeds) {
        const auto rep = gradient_check(seed);
        for (const auto& b : rep.blocks) os << seed << ',' << b.name << ',' << b.size << ',' << b.rel_error << '\n';
        worst = std::max(worst, rep.max_rel_error());
    }
    write_text(c.out / "gradcheck.csv", os.str());
    std::cout << "max relative error " << worst << "\n";
    if (worst > 1e-3) throw NumericError("gradient check failed: max relative error " + std::to_string(worst));
    return 0;
}

void print_error(const std::string& kind, const std::string& msg) {
    std::string flat = msg;
    for (char& ch : flat)
        if (ch == '\n') ch = ' ';
    std::cerr << "error: kind=" << kind << " message=" << flat << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-resolution diffusion for gridded traffic"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.configs, "key = value config file, repeatable; later files win");
        sub->add_option("--set", o.overrides, "override one key (key=value), repeatable");
        sub->add_option("--seed", o.seed, "seed for this run");
        sub->add_option("--seeds", o.seeds, "comma-separated seed fan-out");
        sub->add_option("--out", o.out, "output directory (overrides output.dir)");
    };
    auto* synth = app.add_subcommand("synth", "generate a synthetic city bundle");
    auto* train = app.add_subcommand("train", "train a checkpoint");
    auto* sample = app.add_subcommand("sample", "sample held-out windows from a checkpoint");
    auto* eval = app.add_subcommand("eval", "score sample bundles, or train+sample+score per seed");
    auto* refine = app.add_subcommand("refine", "refine coarse fields zero-shot");
    auto* schedule = app.add_subcommand("schedule", "write the noise schedule as CSV");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the denoiser gradients");
    for (auto* s : {synth, train, sample, eval, refine, schedule, gradcheck}) common(s);
    for (auto* s : {sample, refine}) s->add_option("--checkpoint", o.checkpoint, "checkpoint bundle directory");
    eval->add_option("--generated", o.generated, "comma-separated sample bundles");
    eval->add_option("--truth", o.truth, "bundle holding truth/<i>/<label> tensors");
    refine->add_option("--coarse", o.coarse, "bundle holding the coarse fields");
    refine->add_option("--level", o.level, "stage label of the coarse fields");
    refine->add_option("--coarse-prefix", o.coarse_prefix, "tensor prefix of the coarse fields");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 1;
    }

    try {
        if (*synth) return o.command = "synth", cmd_synth(o);
        if (*train) return o.command = "train", cmd_train(o);
        if (*sample) return o.command = "sample", cmd_sample(o);
        if (*eval) return o.command = "eval", cmd_eval(o);
        if (*refine) return o.command = "refine", cmd_refine(o);
        if (*schedule) return o.command = "schedule", cmd_schedule(o);
        if (*gradcheck) return o.command = "gradcheck", cmd_gradcheck(o);
    } catch (const ConfigError& e) {
        print_error(e.kind(), e.what());
        return 1;
    } catch (const BundleError& e) {
        print_error(e.kind(), e.what());
        return 1;
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        print_error("io", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 2;
    }
    return 2;
}
