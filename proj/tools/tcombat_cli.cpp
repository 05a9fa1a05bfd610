// Command-line front end: simulate, fit, harmonize, evaluate, compare, resume, verify.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "tcombat/btrr.hpp"
#include "tcombat/errors.hpp"
#include "tcombat/evaluation.hpp"
#include "tcombat/harmonize.hpp"
#include "tcombat/io.hpp"
#include "tcombat/report.hpp"
#include "tcombat/simulator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tcombat;

namespace {

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string dataset_dir(const std::string& dir) {
    if (fs::exists(fs::path(dir) / "dataset.json")) return dir;
    if (fs::exists(fs::path(dir) / "dataset" / "dataset.json")) return (fs::path(dir) / "dataset").string();
    throw DataError("no dataset.json under " + dir);
}

void add_dataset_inputs(io::RunManifest& m, const std::string& dir) {
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) m.add_input(e.path().string());
}

/// key=value, or a bare value labelled by its directory name.
std::pair<std::string, std::string> labelled(const std::string& arg) {
    const auto eq = arg.find('=');
    if (eq != std::string::npos) return {arg.substr(0, eq), arg.substr(eq + 1)};
    return {fs::path(arg).filename().string(), arg};
}

void require_seed(const std::optional<std::uint64_t>& flag, const json& config, const char* command) {
    if (!flag && !config.contains("seed"))
        throw ConfigError(std::string(command) + " requires an explicit seed (--seed or a \"seed\" config key)");
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

void run_simulate(const SimulateArgs& a) {
    Stopwatch clock;
    json cj = a.config.empty() ? json::object() : io::load_json(a.config);
    require_seed(a.seed, cj, "simulate");
    if (a.seed) cj["seed"] = *a.seed;
    const auto cfg = io::sim_config_from_json(cj);
    const auto [data, truth] = simulate_study(cfg);
    fs::create_directories(a.out);
    const auto ds = (fs::path(a.out) / "dataset").string();
    const auto tr = (fs::path(a.out) / "truth").string();
    io::write_dataset(ds, data);
    io::write_truth(tr, truth);
    const auto effective = (fs::path(a.out) / "effective_config.json").string();
    io::write_text(effective, io::to_json(cfg).dump(2) + "\n");

    io::RunManifest m;
    m.command = "simulate";
    m.config = io::to_json(cfg);
    m.seed = cfg.seed;
    if (!a.config.empty()) m.add_input(a.config);
    m.add_output_tree(ds);
    m.add_output_tree(tr);
    m.add_output(effective);
    m.timings["total"] = clock.seconds();
    io::write_manifest((fs::path(a.out) / "manifest.json").string(), m);
    std::cout << "simulated " << data.n_images() << " images on " << data.n_scanners() << " scanners into " << a.out
              << "\n";
}

// ---------------------------------------------------------------------------

struct FitArgs {
    std::string data, method = "tc-cs-3d", config, out, checkpoint;
    std::optional<std::uint64_t> seed;
    std::size_t chains = 1, checkpoint_every = 0, stop_after = 0;
};

void run_fit(const FitArgs& a) {
    Stopwatch clock;
    json cj = a.config.empty() ? json::object() : io::load_json(a.config);
    require_seed(a.seed, cj, "fit");
    if (a.seed) cj["seed"] = *a.seed;
    const bool longitudinal = a.method == "tc-l-3d" || a.method == "tc-l-sl";
    const bool slicewise = a.method == "tc-cs-sl" || a.method == "tc-l-sl";
    if (!longitudinal && !slicewise && a.method != "tc-cs-3d") throw ConfigError("unknown fit method: " + a.method);
    if (longitudinal) cj["longitudinal"] = true;
    else if (cj.value("longitudinal", false)) throw ConfigError("method " + a.method + " is cross-sectional");
    if (!a.checkpoint.empty()) cj["checkpoint_path"] = a.checkpoint;
    if (a.checkpoint_every) cj["checkpoint_every"] = a.checkpoint_every;
    if (a.stop_after) cj["stop_after"] = a.stop_after;
    const auto cfg = io::sampler_config_from_json(cj);
    if ((cfg.checkpoint_every || cfg.stop_after) && (slicewise || a.chains > 1))
        throw ConfigError("checkpointing is supported for single-chain volume fits only");
    if (a.chains == 0) throw ConfigError("chains must be >= 1");

    const auto dir = dataset_dir(a.data);
    const auto data = io::read_dataset(dir);
    PosteriorStore store;
    if (a.chains > 1) store = fit_chains(data, cfg, a.chains, slicewise);
    else if (slicewise) store = fit_slicewise(data, cfg);
    else store = fit(data, cfg);
    io::write_store(a.out, store);
    const auto effective = a.out + ".config.json";
    json echo = io::to_json(cfg);
    echo["method"] = a.method;
    echo["chains"] = a.chains;
    io::write_text(effective, echo.dump(2) + "\n");

    io::RunManifest m;
    m.command = "fit";
    m.config = echo;
    m.seed = cfg.seed;
    if (!a.config.empty()) m.add_input(a.config);
    add_dataset_inputs(m, dir);
    m.add_output(a.out);
    m.add_output(effective);
    if (!cfg.checkpoint_path.empty() && fs::exists(cfg.checkpoint_path)) m.add_output(cfg.checkpoint_path);
    m.timings["total"] = clock.seconds();
    io::write_manifest(a.out + ".manifest.json", m);
    std::cout << "fit " << a.method << ": " << store.draws << " draws" << (store.complete ? "" : " (stopped early)")
              << ", written to " << a.out << "\n";
}

// ---------------------------------------------------------------------------

struct ResumeArgs {
    std::string checkpoint, data, out;
    std::size_t iters = 0;
};

void run_resume(const ResumeArgs& a) {
    Stopwatch clock;
    const auto dir = dataset_dir(a.data);
    const auto data = io::read_dataset(dir);
    const auto store = resume(a.checkpoint, data, a.iters);
    io::write_store(a.out, store);
    io::RunManifest m;
    m.command = "resume";
    m.config = io::to_json(checkpoint_config(a.checkpoint));
    m.seed = store.seed;
    m.add_input(a.checkpoint);
    add_dataset_inputs(m, dir);
    m.add_output(a.out);
    m.timings["total"] = clock.seconds();
    io::write_manifest(a.out + ".manifest.json", m);
    std::cout << "resumed chain: " << store.draws << " draws written to " << a.out << "\n";
}

// ---------------------------------------------------------------------------

struct HarmonizeArgs {
    std::string data, method, store, config, out;
    bool remove_covariates = false;
};

void run_harmonize(const HarmonizeArgs& a) {
    Stopwatch clock;
    const auto dir = dataset_dir(a.data);
    const auto data = io::read_dataset(dir);
    io::RunManifest m;
    m.command = "harmonize";
    add_dataset_inputs(m, dir);
    HarmonizationOutput out;
    json echo = {{"method", a.method}};
    if (a.method == "tc") {
        if (a.store.empty()) throw ConfigError("harmonize --method tc requires --store");
        const auto store = io::read_store(a.store);
        m.add_input(a.store);
        out = tensor_combat_adjust(data, store);
        m.seed = store.seed;
    } else if (a.method == "combat") {
        const auto opt = a.config.empty() ? CombatOptions{} : io::combat_options_from_json(io::load_json(a.config));
        if (!a.config.empty()) m.add_input(a.config);
        echo["combat"] = io::to_json(opt);
        out = combat_adjust(data, combat_fit(data, opt));
    } else if (a.method == "ar") {
        echo["remove_covariates"] = a.remove_covariates;
        out = adjusted_residuals(data, ResidualOptions{a.remove_covariates});
    } else if (a.method == "none") {
        out = no_harmonization(data);
    } else {
        throw ConfigError("unknown harmonization method: " + a.method);
    }
    io::write_harmonization(a.out, out, data);
    m.config = echo;
    m.add_output_tree(a.out);
    m.timings["total"] = clock.seconds();
    io::write_manifest((fs::path(a.out) / "manifest.json").string(), m);
    std::cout << "harmonized " << data.n_images() << " images with " << a.method << " into " << a.out << "\n";
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::vector<std::string> inputs, stores;
    std::string truth, out, target, dice_config;
    std::optional<std::uint64_t> seed;
    double alpha = 0.05, dice_fraction = 0.5;
    bool no_cv = false, bonferroni = false;
};

void run_evaluate(const EvaluateArgs& a) {
    Stopwatch clock;
    if (!a.no_cv || !a.dice_config.empty()) {
        if (!a.seed) throw ConfigError("evaluate requires --seed for cross-validation and splits");
    }
    EvaluationOptions opt;
    opt.alpha_level = a.alpha;
    opt.bonferroni = a.bonferroni;
    opt.target = a.target;
    opt.cross_validate = !a.no_cv;
    if (a.seed) opt.cv.seed = *a.seed;

    io::RunManifest m;
    m.command = "evaluate";
    m.seed = a.seed.value_or(0);
    std::optional<GroundTruth> truth;
    if (!a.truth.empty()) {
        truth = io::read_truth(a.truth);
        for (const auto& e : fs::directory_iterator(a.truth))
            if (e.is_regular_file()) m.add_input(e.path().string());
    }
    std::map<std::string, std::string> store_paths;
    for (const auto& s : a.stores) store_paths.insert(labelled(s));
    std::optional<SamplerConfig> dice_cfg;
    if (!a.dice_config.empty()) {
        json cj = io::load_json(a.dice_config);
        if (!cj.contains("seed")) cj["seed"] = *a.seed;
        dice_cfg = io::sampler_config_from_json(cj);
        m.add_input(a.dice_config);
    }

    fs::create_directories(a.out);
    std::vector<json> reports;
    for (const auto& arg : a.inputs) {
        const auto [label, path] = labelled(arg);
        const auto dir = dataset_dir(path);
        const auto data = io::read_dataset(dir);
        add_dataset_inputs(m, dir);
        std::optional<PosteriorStore> store;
        if (const auto it = store_paths.find(label); it != store_paths.end()) {
            store = io::read_store(it->second);
            m.add_input(it->second);
        }
        auto report = evaluate_dataset(data, label, opt, store ? &*store : nullptr, truth ? &*truth : nullptr);
        if (store && store->n_scanners >= 2 && store->draws > 0) {
            const auto sig = pairwise_scanner_significance(*store, a.alpha, a.bonferroni);
            const auto map_path = (fs::path(a.out) / ("proportion_" + label + ".tht")).string();
            io::write_tensor(map_path, Tensor3::from_masked(store->mask, sig.proportion));
            report["significance"]["proportion_map"] = map_path;
        }
        if (dice_cfg) {
            const auto d = reproducibility_pipeline(data, *dice_cfg, a.dice_fraction, a.alpha, *a.seed);
            json rows = json::array();
            for (std::size_t s = 0; s < d.covariates.size(); ++s)
                rows.push_back({{"covariate", d.covariates[s]},
                                {"dice_first", d.dice_first[s]},
                                {"dice_second", d.dice_second[s]},
                                {"count_full", d.count_full[s]},
                                {"count_first", d.count_first[s]},
                                {"count_second", d.count_second[s]}});
            report["dice"] = rows;
        }
        const auto path_out = (fs::path(a.out) / ("report_" + label + ".json")).string();
        io::write_text(path_out, report.dump(2) + "\n");
        reports.push_back(std::move(report));
        std::cout << "evaluated " << label << "\n";
    }
    const auto csv = (fs::path(a.out) / "reports.csv").string();
    io::write_text(csv, reports_csv(reports));
    m.config = {{"alpha_level", a.alpha}, {"bonferroni", a.bonferroni}, {"target", a.target},
                {"cross_validate", !a.no_cv}, {"dice_fraction", a.dice_fraction}};
    m.add_output_tree(a.out);
    m.timings["total"] = clock.seconds();
    io::write_manifest((fs::path(a.out) / "manifest.json").string(), m);
}

// ---------------------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> reports;
    std::string out;
};

void run_compare(const CompareArgs& a) {
    std::vector<json> reports;
    for (const auto& r : a.reports) reports.push_back(io::load_json(r));
    const auto cmp = compare_reports(reports);
    fs::create_directories(a.out);
    io::write_text((fs::path(a.out) / "comparison.json").string(), cmp.dump(2) + "\n");
    io::write_text((fs::path(a.out) / "comparison.csv").string(), comparison_csv(cmp));
    io::RunManifest m;
    m.command = "compare";
    for (const auto& r : a.reports) m.add_input(r);
    m.add_output((fs::path(a.out) / "comparison.json").string());
    m.add_output((fs::path(a.out) / "comparison.csv").string());
    io::write_manifest((fs::path(a.out) / "manifest.json").string(), m);
    std::cout << comparison_csv(cmp);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-site image harmonization with tensor regression"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* c_sim = app.add_subcommand("simulate", "Generate a synthetic multi-scanner study");
    c_sim->add_option("--config", sim.config, "Simulation config (JSON)");
    c_sim->add_option("--seed", sim.seed, "Random seed");
    c_sim->add_option("--out", sim.out, "Output directory")->required();

    FitArgs fa;
    auto* c_fit = app.add_subcommand("fit", "Fit the tensor regression and store posterior draws");
    c_fit->add_option("--data", fa.data, "Dataset directory")->required();
    c_fit->add_option("--method", fa.method, "tc-cs-3d, tc-cs-sl, tc-l-3d or tc-l-sl");
    c_fit->add_option("--config", fa.config, "Sampler config (JSON)");
    c_fit->add_option("--seed", fa.seed, "Random seed");
    c_fit->add_option("--chains", fa.chains, "Independent chains run in parallel");
    c_fit->add_option("--checkpoint", fa.checkpoint, "Checkpoint file");
    c_fit->add_option("--checkpoint-every", fa.checkpoint_every, "Sweeps between checkpoints");
    c_fit->add_option("--stop-after", fa.stop_after, "Stop after this many sweeps");
    c_fit->add_option("--out", fa.out, "Posterior store file")->required();

    ResumeArgs ra;
    auto* c_res = app.add_subcommand("resume", "Continue a chain from its checkpoint");
    c_res->add_option("--checkpoint", ra.checkpoint, "Checkpoint file")->required();
    c_res->add_option("--data", ra.data, "Dataset directory")->required();
    c_res->add_option("--iters", ra.iters, "Override the total iteration count");
    c_res->add_option("--out", ra.out, "Posterior store file")->required();

    HarmonizeArgs ha;
    auto* c_har = app.add_subcommand("harmonize", "Remove scanner effects");
    c_har->add_option("--data", ha.data, "Dataset directory")->required();
    c_har->add_option("--method", ha.method, "tc, combat, ar or none")->required();
    c_har->add_option("--store", ha.store, "Posterior store (tc)");
    c_har->add_option("--config", ha.config, "ComBat options (JSON)");
    c_har->add_flag("--remove-covariates", ha.remove_covariates, "ar: also subtract the fitted covariate part");
    c_har->add_option("--out", ha.out, "Output directory")->required();

    EvaluateArgs ea;
    auto* c_eval = app.add_subcommand("evaluate", "Score harmonized datasets");
    c_eval->add_option("--input", ea.inputs, "label=directory (repeatable)")->required();
    c_eval->add_option("--store", ea.stores, "label=posterior store for significance maps (repeatable)");
    c_eval->add_option("--truth", ea.truth, "Ground-truth directory from simulate");
    c_eval->add_option("--seed", ea.seed, "Seed for folds and splits");
    c_eval->add_option("--alpha", ea.alpha, "Significance level");
    c_eval->add_flag("--bonferroni", ea.bonferroni, "Bonferroni bands instead of joint bands");
    c_eval->add_option("--target", ea.target, "Covariate predicted in cross-validation");
    c_eval->add_flag("--no-cv", ea.no_cv, "Skip cross-validated prediction");
    c_eval->add_option("--dice-config", ea.dice_config, "Sampler config enabling the split-half Dice analysis");
    c_eval->add_option("--dice-fraction", ea.dice_fraction, "Fraction of subjects in the first split");
    c_eval->add_option("--out", ea.out, "Report directory")->required();

    CompareArgs ca;
    auto* c_cmp = app.add_subcommand("compare", "Paired comparison of evaluation reports");
    c_cmp->add_option("--report", ca.reports, "Report JSON (first is the baseline; repeatable)")->required();
    c_cmp->add_option("--out", ca.out, "Output directory")->required();

    std::string manifest_path;
    auto* c_ver = app.add_subcommand("verify", "Re-hash every file listed in a run manifest");
    c_ver->add_option("manifest", manifest_path, "Manifest JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
    }

    try {
        if (*c_sim) run_simulate(sim);
        else if (*c_fit) run_fit(fa);
        else if (*c_res) run_resume(ra);
        else if (*c_har) run_harmonize(ha);
        else if (*c_eval) run_evaluate(ea);
        else if (*c_cmp) run_compare(ca);
        else if (*c_ver) {
            io::verify_manifest(io::read_manifest(manifest_path));
            std::cout << "all hashes match\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::data);
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
