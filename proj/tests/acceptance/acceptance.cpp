// Acceptance suite: one PASS/FAIL line per criterion. Thresholds are fixed
// below; pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "../support/oracles.hpp"
#include "tcombat/btrr.hpp"
#include "tcombat/errors.hpp"
#include "tcombat/evaluation.hpp"
#include "tcombat/harmonize.hpp"
#include "tcombat/linalg.hpp"
#include "tcombat/random.hpp"
#include "tcombat/report.hpp"
#include "tcombat/simulator.hpp"

using namespace tcombat;

namespace {

// ---------------------------------------------------------------------------
// Pinned thresholds

constexpr double kOracleTol = 1e-8;            // 1
constexpr std::size_t kStationaryDraws = 20000; // 2
constexpr double kStationarySe = 3.0;
constexpr double kStationaryPp = 0.02;
constexpr double kGammaCorr = 0.9;             // 3
constexpr double kThetaCorr = 0.85;
constexpr double kAnovaBefore = 0.40, kAnovaAfter = 0.07;        // 4
constexpr double kBartlettBefore = 0.25, kBartlettAfter = 0.08;
constexpr double kRmseGain = 0.20, kRmseP = 0.01;               // 5
constexpr double kBlockSensitivity = 0.5, kBlockFpr = 0.05;     // 6
constexpr double kGigMomentTol = 0.02, kGigKsLevel = 1e-3;      // 7
constexpr std::size_t kGigDraws = 100000;
constexpr double kCoverageLo = 0.92, kCoverageHi = 0.98;        // 8
constexpr std::size_t kCoverageReps = 500;
constexpr double kCombatTol = 1e-10, kShrinkFraction = 0.95;    // 9
constexpr double kSliceCorr = 0.8, kSliceGamma = 0.85, kSliceTheta = 0.8;  // 11
constexpr double kCvP = 0.05;                                   // 12
constexpr double kDice = 0.7;                                   // 13

constexpr std::size_t kSeeds = 10;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double corr(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(a, b).value_or(std::nan(""));
}

std::vector<double> compact(const Tensor3& t) {
    std::vector<double> v;
    for (auto f : t.mask().voxels()) v.push_back(t[f]);
    return v;
}

std::vector<double> compact_on(const Tensor3& t, const Mask& mask) {
    std::vector<double> v;
    for (auto f : mask.voxels()) v.push_back(t[f]);
    return v;
}

SamplerConfig recovery_config(std::uint64_t seed) {
    SamplerConfig c;
    c.rank = 4;
    c.iters = 3000;
    c.burn_in = 1000;
    c.thin = 2;
    c.seed = seed;
    return c;
}

SamplerConfig short_config(std::uint64_t seed) {
    SamplerConfig c;
    c.rank = 4;
    c.iters = 800;
    c.burn_in = 400;
    c.thin = 2;
    c.seed = seed;
    return c;
}

// Shared default-scale fit used by criteria 3, 4, 11 and 13.
struct DefaultFit {
    StudyDataset data;
    GroundTruth truth;
    PosteriorStore store;
};

const DefaultFit& default_fit() {
    static std::optional<DefaultFit> cached;
    if (!cached) {
        SimConfig sim;
        sim.seed = 2024;
        auto [data, truth] = simulate_study(sim);
        auto store = fit(data, recovery_config(11));
        cached = DefaultFit{std::move(data), std::move(truth), std::move(store)};
    }
    return *cached;
}

struct Recovery {
    double min_gamma = 1.0, min_theta = 1.0;
};

Recovery recovery(const PosteriorStore& store, const GroundTruth& truth, const Mask& mask) {
    Recovery r;
    for (std::size_t j = 0; j < store.n_scanners; ++j)
        r.min_gamma = std::min(r.min_gamma, corr(store.mean(store.gamma[j]), compact_on(truth.gamma[j], mask)));
    for (std::size_t s = 0; s < store.theta.size() && s < truth.theta.size(); ++s)
        r.min_theta = std::min(r.min_theta, corr(store.mean(store.theta[s]), compact_on(truth.theta[s], mask)));
    return r;
}

// Ten-seed study shared by criteria 5 and 12.
struct SeedRow {
    double rmse_none, rmse_tc, rmse_combat;
    double cv_none, cv_tc, cv_combat;
};

const std::vector<SeedRow>& seed_study() {
    static std::vector<SeedRow> rows;
    if (!rows.empty()) return rows;
    for (std::size_t s = 0; s < kSeeds; ++s) {
        SimConfig sim;
        sim.seed = 500 + s;
        const auto [data, truth] = simulate_study(sim);
        const auto tc = tensor_combat_adjust(data, fit(data, short_config(900 + s))).apply_to(data);
        const auto cb = combat_adjust(data, combat_fit(data)).apply_to(data);
        Eigen::VectorXd age = data.raw_covariates().col(0);
        CvOptions cv;
        cv.seed = 77 + s;
        SeedRow r;
        r.rmse_none = scanner_pairwise_metrics(data).mean_rmse();
        r.rmse_tc = scanner_pairwise_metrics(tc).mean_rmse();
        r.rmse_combat = scanner_pairwise_metrics(cb).mean_rmse();
        r.cv_none = kfold_cv_predict(data, age, cv).rmse;
        r.cv_tc = kfold_cv_predict(tc, age, cv).rmse;
        r.cv_combat = kfold_cv_predict(cb, age, cv).rmse;
        std::printf("  seed %zu: rmse none %.4f tc %.4f combat %.4f | cv none %.4f tc %.4f combat %.4f\n", s,
                    r.rmse_none, r.rmse_tc, r.rmse_combat, r.cv_none, r.cv_tc, r.cv_combat);
        std::fflush(stdout);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Criteria

StudyDataset oracle_instance() {
    RngStream rng(11);
    std::vector<std::vector<double>> imgs(4, std::vector<double>(9));
    for (auto& img : imgs)
        for (std::size_t v = 0; v < 9; ++v) img[v] = 1.0 + 0.3 * static_cast<double>(v % 3) + 0.5 * rng.standard_normal();
    return oracle::make_dataset(Dims(3, 3), imgs, {"a", "a", "a", "a"});
}

SamplerConfig oracle_config() {
    SamplerConfig c;
    c.rank = 1;
    c.n_mixture = 1;
    c.iters = 10;
    c.burn_in = 0;
    c.thin = 1;
    c.seed = 5;
    c.freeze_hyper = true;
    c.freeze_noise = true;
    return c;
}

const TermRef kMu{Family::mu, 0};

Outcome c1() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = oracle_instance();
    BtrrSampler s(data, oracle_config());
    for (int i = 0; i < 3; ++i) s.sweep();
    double worst_mean = 0.0, worst_var = 0.0;
    for (std::size_t d = 0; d < 2; ++d) {
        const auto joint = oracle::mu_margin_joint(s, d, 0);
        const auto m = s.state().mu.terms.front().coef.margin(0, d);
        const Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
        for (std::size_t k = 0; k < 3; ++k) {
            const auto got = s.margin_conditional(kMu, d, 0, k);
            const auto [mean, var] = joint.conditional(k, u);
            worst_mean = std::max(worst_mean, std::abs(got.mean - mean));
            worst_var = std::max(worst_var, std::abs(got.var - var) / var);
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst_mean < kOracleTol && worst_var < kOracleTol && secs < 1.0,
            "max |dmean| " + fmt("%.2e", worst_mean) + ", max rel dvar " + fmt("%.2e", worst_var) + ", " +
                fmt("%.3f s", secs)};
}

Outcome c2() {
    // Gibbs scans of one margin with the other held fixed; the target is the
    // Gaussian conditional posterior of that margin.
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = oracle_instance();
    BtrrSampler s(data, oracle_config());
    for (int i = 0; i < 5; ++i) s.sweep();
    const auto joint = oracle::mu_margin_joint(s, 0, 0);
    const auto [post_mean, post_cov] = joint.posterior();
    const std::size_t thin = 5, burn = 1000;
    for (std::size_t i = 0; i < burn; ++i) s.update_margin(kMu, 0, 0);
    std::vector<std::vector<double>> x(3, std::vector<double>(kStationaryDraws));
    for (std::size_t t = 0; t < kStationaryDraws; ++t) {
        for (std::size_t r = 0; r < thin; ++r) s.update_margin(kMu, 0, 0);
        const auto m = s.state().mu.terms.front().coef.margin(0, 0);
        for (std::size_t k = 0; k < 3; ++k) x[k][t] = m[k];
    }
    double worst_z = 0.0, worst_pp = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
        const double n = static_cast<double>(kStationaryDraws);
        const double mean = std::accumulate(x[k].begin(), x[k].end(), 0.0) / n;
        const std::size_t nb = 50, bs = kStationaryDraws / nb;
        double ss = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            const double bm = std::accumulate(x[k].begin() + b * bs, x[k].begin() + (b + 1) * bs, 0.0) / bs;
            ss += (bm - mean) * (bm - mean);
        }
        const double se = std::sqrt(ss / (nb - 1) / nb);
        worst_z = std::max(worst_z, std::abs(mean - post_mean(k)) / se);
        auto sorted = x[k];
        std::sort(sorted.begin(), sorted.end());
        const double sd = std::sqrt(post_cov(k, k));
        std::vector<double> cdf(sorted.size());
        for (std::size_t i = 0; i < sorted.size(); ++i) cdf[i] = oracle::normal_cdf((sorted[i] - post_mean(k)) / sd);
        worst_pp = std::max(worst_pp, oracle::ks_statistic(cdf));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst_z < kStationarySe && worst_pp < kStationaryPp && secs < 60.0,
            "max |mean err|/MCSE " + fmt("%.2f", worst_z) + ", max P-P dev " + fmt("%.4f", worst_pp) + ", " +
                fmt("%.1f s", secs)};
}

Outcome c3() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& f = default_fit();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto r = recovery(f.store, f.truth, f.data.mask());
    return {r.min_gamma >= kGammaCorr && r.min_theta >= kThetaCorr,
            "min corr gamma " + fmt("%.3f", r.min_gamma) + ", min corr theta " + fmt("%.3f", r.min_theta) +
                ", fit " + fmt("%.0f s", secs)};
}

Outcome c4() {
    const auto& f = default_fit();
    const auto tc = tensor_combat_adjust(f.data, f.store).apply_to(f.data);
    auto fractions = [](const StudyDataset& d) {
        const auto res = covariate_residuals(d);
        return std::pair{anova_per_voxel(res, d.scanner_of_images()).fraction_below(0.05),
                         bartlett_per_voxel(res, d.scanner_of_images()).fraction_below(0.05)};
    };
    const auto [a0, b0] = fractions(f.data);
    const auto [a1, b1] = fractions(tc);
    return {a0 >= kAnovaBefore && a1 <= kAnovaAfter && b0 >= kBartlettBefore && b1 <= kBartlettAfter,
            "ANOVA " + fmt("%.3f", a0) + " -> " + fmt("%.3f", a1) + ", Bartlett " + fmt("%.3f", b0) + " -> " +
                fmt("%.3f", b1)};
}

Outcome c5() {
    const auto& rows = seed_study();
    std::vector<double> none, tc, cb;
    for (const auto& r : rows) {
        none.push_back(r.rmse_none);
        tc.push_back(r.rmse_tc);
        cb.push_back(r.rmse_combat);
    }
    const double mn = std::accumulate(none.begin(), none.end(), 0.0) / none.size();
    const double mt = std::accumulate(tc.begin(), tc.end(), 0.0) / tc.size();
    const double mc = std::accumulate(cb.begin(), cb.end(), 0.0) / cb.size();
    const auto pt = paired_t_test(tc, none), pc = paired_t_test(cb, none);
    const bool ok = mt <= (1.0 - kRmseGain) * mn && mc <= (1.0 - kRmseGain) * mn && pt.mean_difference < 0 &&
                    pc.mean_difference < 0 && pt.p_value < kRmseP && pc.p_value < kRmseP;
    return {ok, "mean RMSE none " + fmt("%.4f", mn) + ", tc " + fmt("%.4f", mt) + " (p " + fmt("%.1e", pt.p_value) +
                    "), combat " + fmt("%.4f", mc) + " (p " + fmt("%.1e", pc.p_value) + ")"};
}

Outcome c6() {
    SimConfig sim;
    sim.seed = 31;
    sim.gamma_amplitude = 0.0;  // scanner maps differ only inside the block
    const auto [data, truth] = simulate_study(sim);
    const auto store = fit(data, recovery_config(32));
    const auto rep = pairwise_scanner_significance(store, 0.05);
    const auto det = block_detection(rep.proportion, data.mask(), truth.block);
    return {det.sensitivity >= kBlockSensitivity && det.false_positive_rate <= kBlockFpr,
            "sensitivity " + fmt("%.3f", det.sensitivity) + ", FPR " + fmt("%.4f", det.false_positive_rate)};
}

Outcome c7() {
    // chi and psi are chosen so the sample variance of 1e5 draws has relative
    // standard error <= 0.8%, i.e. the 2% bound sits 2.5 SE out. Heavier-tailed
    // triples are covered by the KS grid of the unit tests.
    const std::vector<std::array<double, 3>> grid{{-3.0, 8.0, 8.0}, {-0.5, 4.0, 4.0}, {0.3, 2.0, 4.0},
                                                  {2.0, 0.1, 0.5},  {2.0, 1.0, 1.0}, {2.0, 4.0, 4.0}};
    RngStream rng(7);
    bool ok = true;
    double worst_mean = 0.0, worst_var = 0.0, worst_p = 1.0;
    for (const auto& g : grid) {
        std::vector<double> x(kGigDraws);
        for (auto& v : x) v = draw_gig({g[0], g[1], g[2]}, rng);
        const oracle::GigReference ref(g[0], g[1], g[2]);
        const double n = static_cast<double>(kGigDraws);
        const double m = std::accumulate(x.begin(), x.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : x) ss += (v - m) * (v - m);
        const double var = ss / (n - 1.0);
        const double em = std::abs(m / ref.mean() - 1.0), ev = std::abs(var / ref.variance() - 1.0);
        std::sort(x.begin(), x.end());
        const double p = oracle::ks_p_value(oracle::ks_statistic(ref.cdf_sorted(x)), x.size());
        worst_mean = std::max(worst_mean, em);
        worst_var = std::max(worst_var, ev);
        worst_p = std::min(worst_p, p);
        ok &= em <= kGigMomentTol && ev <= kGigMomentTol && p > kGigKsLevel;
    }
    return {ok, "max rel mean err " + fmt("%.4f", worst_mean) + ", max rel var err " + fmt("%.4f", worst_var) +
                    ", min KS p " + fmt("%.3f", worst_p)};
}

Outcome c8() {
    RngStream rng(8);
    const std::size_t p = 50, t = 1000;
    const auto mask = full_mask(Dims(1, p));
    std::vector<double> theta0(p), y(p), draws(t * p);
    for (std::size_t v = 0; v < p; ++v) theta0[v] = std::sin(0.3 * static_cast<double>(v));
    std::size_t covered = 0;
    for (std::size_t r = 0; r < kCoverageReps; ++r) {
        for (std::size_t v = 0; v < p; ++v) y[v] = theta0[v] + rng.standard_normal();
        for (std::size_t s = 0; s < t; ++s)
            for (std::size_t v = 0; v < p; ++v) draws[s * p + v] = y[v] + rng.standard_normal();
        const auto m = joint_credible_band(draws, t, mask);
        bool inside = true;
        for (std::size_t v = 0; v < p; ++v) inside &= std::abs(theta0[v] - m.mean[v]) <= m.q_star * m.sd[v];
        covered += inside;
    }
    const double cov = static_cast<double>(covered) / kCoverageReps;
    return {cov >= kCoverageLo && cov <= kCoverageHi, "coverage " + fmt("%.3f", cov)};
}

Outcome c9() {
    const auto toy = oracle::make_dataset(Dims(1, 2), {{1, 101}, {3, 103}, {6, 106}, {10, 110}}, {"a", "a", "b", "b"});
    CombatOptions off;
    off.empirical_bayes = false;
    const auto h = combat_adjust(toy, combat_fit(toy, off));
    // Hand values: grand mean 5, pooled variance 2.5, standardized site variances 0.8 and 3.2.
    const double e = 1.0 / std::sqrt(0.8);
    const double expect[4] = {5 - e, 5 + e, 5 - e, 5 + e};
    double worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        worst = std::max(worst, std::abs(h.images[i][0] - expect[i]));
        worst = std::max(worst, std::abs(h.images[i][1] - expect[i] - 100.0));
    }
    SimConfig sim;
    sim.dims = Dims(6, 6, 4);
    sim.scanners = 3;
    sim.gamma_amplitude = 0.0;
    sim.block_amplitude = 0.0;
    sim.delta_low = sim.delta_high = 1.0;
    sim.noise_sd = 1.0;
    sim.seed = 9;
    const auto [data, truth] = simulate_study(sim);
    const auto prm = combat_fit(data);
    std::size_t shrunk = 0, total = 0;
    for (Eigen::Index j = 0; j < prm.gamma_hat.rows(); ++j)
        for (Eigen::Index v = 0; v < prm.gamma_hat.cols(); ++v) {
            ++total;
            shrunk += std::abs(prm.gamma_star(j, v)) < std::abs(prm.gamma_hat(j, v));
        }
    const double frac = static_cast<double>(shrunk) / total;
    return {worst < kCombatTol && frac >= kShrinkFraction,
            "hand toy max err " + fmt("%.2e", worst) + ", shrunk fraction " + fmt("%.3f", frac)};
}

Outcome c10() {
    SimConfig sim;
    sim.seed = 41;
    const auto [data, truth] = simulate_study(sim);
    auto cfg = short_config(42);
    cfg.iters = 1000;
    cfg.burn_in = 400;
    const auto a = fit(data, cfg), b = fit(data, cfg);
    const auto path = (std::filesystem::temp_directory_path() / "tcombat_acceptance.ckpt").string();
    auto stop = cfg;
    stop.checkpoint_path = path;
    stop.checkpoint_every = 100;
    stop.stop_after = 500;
    const auto partial = fit(data, stop);
    const auto resumed = resume(path, data);
    std::filesystem::remove(path);
    const bool same = a == b, exact = resumed == a && !partial.complete;
    return {same && exact, std::string("same-seed stores ") + (same ? "identical" : "differ") +
                               ", resume at 500/1000 " + (exact ? "bit-exact" : "differs")};
}

Outcome c11() {
    const auto& f = default_fit();
    const auto sl = fit_slicewise(f.data, recovery_config(11));
    double worst = 1.0;
    for (std::size_t j = 0; j < sl.n_scanners; ++j)
        worst = std::min(worst, corr(sl.mean(sl.gamma[j]), f.store.mean(f.store.gamma[j])));
    const auto r3 = recovery(f.store, f.truth, f.data.mask());
    const auto rs = recovery(sl, f.truth, f.data.mask());
    const bool ok = worst >= kSliceCorr && r3.min_gamma >= kSliceGamma && rs.min_gamma >= kSliceGamma &&
                    r3.min_theta >= kSliceTheta && rs.min_theta >= kSliceTheta;
    return {ok, "min corr(sl, 3d) " + fmt("%.3f", worst) + "; 3d gamma/theta " + fmt("%.3f", r3.min_gamma) + "/" +
                    fmt("%.3f", r3.min_theta) + "; sl gamma/theta " + fmt("%.3f", rs.min_gamma) + "/" +
                    fmt("%.3f", rs.min_theta)};
}

Outcome c12() {
    const auto& rows = seed_study();
    std::vector<double> none, tc, cb;
    for (const auto& r : rows) {
        none.push_back(r.cv_none);
        tc.push_back(r.cv_tc);
        cb.push_back(r.cv_combat);
    }
    const auto pt = paired_t_test(tc, none), pc = paired_t_test(cb, none);
    const bool ok = pt.mean_difference <= 0 && pc.mean_difference <= 0 && pt.p_value < kCvP && pc.p_value < kCvP;
    const double mn = std::accumulate(none.begin(), none.end(), 0.0) / none.size();
    return {ok, "mean CV RMSE none " + fmt("%.4f", mn) + ", tc diff " + fmt("%+.4f", pt.mean_difference) + " (p " +
                    fmt("%.1e", pt.p_value) + "), combat diff " + fmt("%+.4f", pc.mean_difference) + " (p " +
                    fmt("%.1e", pc.p_value) + ")"};
}

Outcome c13() {
    // Unit properties on random maps.
    RngStream rng(13);
    bool props = true;
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<std::uint8_t> a(64), b(64);
        for (auto& x : a) x = rng.uniform() < 0.3;
        for (auto& x : b) x = rng.uniform() < 0.5;
        const double d = dice(a, b);
        props &= d >= 0.0 && d <= 1.0 && d == dice(b, a) && dice(a, a) == 1.0;
    }
    props &= dice(std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0, 0, 0},
                  std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 1, 0, 0}) == 0.6;

    const auto& f = default_fit();
    const auto tc = tensor_combat_adjust(f.data, f.store).apply_to(f.data);
    const auto rep = reproducibility_pipeline(tc, recovery_config(13), 0.5, 0.05, 14);
    const double d1 = rep.dice_first.at(0), d2 = rep.dice_second.at(0);
    return {props && d1 >= kDice && d2 >= kDice,
            "age map Dice " + fmt("%.3f", d1) + " / " + fmt("%.3f", d2) + " (full " +
                std::to_string(rep.count_full.at(0)) + " voxels), unit properties " + (props ? "hold" : "fail")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"conditional-posterior oracle", c1}, {"sampler stationarity", c2},
        {"ground-truth recovery", c3},        {"scanner-effect removal", c4},
        {"pairwise-similarity ordering", c5}, {"localized-effect detection", c6},
        {"GIG sampler", c7},                  {"joint-band coverage", c8},
        {"ComBat baseline", c9},              {"determinism and resume", c10},
        {"slicewise/3D consistency", c11},    {"prediction ordering", c12},
        {"Dice reproducibility", c13}};
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::stoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!wanted.empty() && !wanted.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
