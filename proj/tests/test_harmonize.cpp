#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "tcombat/btrr.hpp"
#include "tcombat/errors.hpp"
#include "tcombat/harmonize.hpp"
#include "tcombat/linalg.hpp"
#include "tcombat/simulator.hpp"

using namespace tcombat;

namespace {

/// Single-draw store with constant maps over the mask.
PosteriorStore constant_store(const StudyDataset& data, double mu, const std::vector<double>& theta,
                              const std::vector<double>& gamma, const std::vector<double>& sigma2) {
    PosteriorStore s;
    s.mask = data.mask_ptr();
    const std::size_t p = s.voxels();
    s.n_scanners = data.n_scanners();
    s.scanner_names = data.scanner_names();
    s.images_per_scanner = data.images_per_scanner();
    s.covariate_names = data.covariate_names();
    s.subject_names = data.subject_names();
    s.draws = 1;
    s.mu.assign(p, mu);
    for (double t : theta) s.theta.emplace_back(p, t);
    for (double g : gamma) s.gamma.emplace_back(p, g);
    for (double v : sigma2) s.sigma2.emplace_back(p, v);
    s.fitted.assign(p, 1);
    return s;
}

double mean_abs(const Eigen::MatrixXd& m) { return m.cwiseAbs().mean(); }

SimConfig null_site_sim(std::uint64_t seed) {
    SimConfig s;
    s.dims = Dims(6, 6, 4);
    s.subjects = 60;
    s.scanners = 3;
    s.gamma_amplitude = 0.0;
    s.block_amplitude = 0.0;
    s.delta_low = 1.0;
    s.delta_high = 1.0;
    s.noise_sd = 1.0;
    s.seed = seed;
    return s;
}

SimConfig site_sim(std::uint64_t seed) {
    SimConfig s;
    s.dims = Dims(6, 6, 4);
    s.subjects = 60;
    s.scanners = 3;
    s.seed = seed;
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor-ComBat adjustment

TEST(TensorCombat, ZeroEffectsAndUnitScaleAreTheIdentity) {
    const auto [data, truth] = simulate_study(site_sim(1));
    const auto store = constant_store(data, 0.3, std::vector<double>(data.n_covariates(), 0.2),
                                      std::vector<double>(data.n_scanners(), 0.0),
                                      std::vector<double>(data.n_scanners(), 1.7));
    const auto h = tensor_combat_adjust(data, store);
    ASSERT_EQ(h.images.size(), data.n_images());
    for (std::size_t i = 0; i < data.n_images(); ++i)
        for (auto f : data.mask().voxels()) ASSERT_NEAR(h.images[i][f], data.image(i)[f], 1e-12);
}

TEST(TensorCombat, DirectEvaluationOfTheAdjustment) {
    // Scanner a holds image 0; with sd_a = 2, sd_b = 2/3 and n = (1, 3) the
    // weighted mean sd is 1, so delta_a = 2.
    const Eigen::MatrixXd x = (Eigen::MatrixXd(4, 1) << 1.0, 2.0, 3.0, 6.0).finished();
    const auto data = oracle::make_dataset(Dims(1, 2), {{10.0, 10.0}, {0, 0}, {0, 0}, {0, 0}}, {"a", "b", "b", "b"}, x);
    const double x0 = data.covariates()(0, 0);
    // mu = 2 and theta * x0 = 1 give a fitted mean of 3; Gamma_a = 3.
    const auto store = constant_store(data, 2.0, {1.0 / x0}, {3.0, -1.0}, {4.0, 4.0 / 9.0});
    const auto h = tensor_combat_adjust(data, store);
    EXPECT_NEAR(h.images[0][0], 5.0, 1e-12);
    EXPECT_NEAR(h.delta[0][0], 2.0, 1e-12);
    EXPECT_EQ(h.method, "tc");
    EXPECT_EQ(h.draws, 1u);
}

TEST(TensorCombat, SubjectEffectIsPreservedUnscaled) {
    auto sim = site_sim(2);
    sim.longitudinal = true;
    sim.subjects = 12;
    const auto [data, truth] = simulate_study(sim);
    const auto lon = data.with_time_covariates(false);
    auto store = constant_store(lon, 0.0, std::vector<double>(lon.n_covariates(), 0.0),
                                std::vector<double>(lon.n_scanners(), 0.0),
                                std::vector<double>(lon.n_scanners(), 1.0));
    store.longitudinal = true;
    // Scanner 0 gets twice the noise sd of the others.
    store.sigma2[0].assign(store.voxels(), 4.0);
    store.subject_mean.assign(lon.n_subjects(), std::vector<double>(store.voxels(), 0.0));
    store.subject_mean[0].assign(store.voxels(), 0.8);
    const auto h = tensor_combat_adjust(data, store);
    const auto counts = data.images_per_scanner();
    double n = 0.0, sbar = 0.0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
        n += counts[j];
        sbar += counts[j] * (j == 0 ? 2.0 : 1.0);
    }
    sbar /= n;
    for (std::size_t i = 0; i < data.n_images(); ++i) {
        const double d = (data.scanner_of(i) == 0 ? 2.0 : 1.0) / sbar;
        const double b = data.subject_of(i) == 0 ? 0.8 : 0.0;
        for (auto f : data.mask().voxels()) ASSERT_NEAR(h.images[i][f], (data.image(i)[f] - b) / d + b, 1e-12);
    }
}

TEST(TensorCombat, SingleScannerFitLeavesImagesUnchanged) {
    auto sim = site_sim(3);
    sim.scanners = 1;
    sim.subjects = 20;
    const auto [data, truth] = simulate_study(sim);
    SamplerConfig cfg;
    cfg.iters = 40;
    cfg.burn_in = 20;
    cfg.seed = 3;
    const auto h = tensor_combat_adjust(data, fit(data, cfg));
    for (std::size_t i = 0; i < data.n_images(); ++i)
        for (auto f : data.mask().voxels()) ASSERT_NEAR(h.images[i][f], data.image(i)[f], 1e-8);
}

TEST(TensorCombat, FittedOutputSatisfiesInvariants) {
    const auto [data, truth] = simulate_study(site_sim(4));
    SamplerConfig cfg;
    cfg.iters = 60;
    cfg.burn_in = 30;
    cfg.seed = 4;
    const auto h = tensor_combat_adjust(data, fit(data, cfg));
    const auto counts = data.images_per_scanner();
    for (auto f : data.mask().voxels()) {
        double s = 0.0;
        for (std::size_t j = 0; j < counts.size(); ++j) {
            s += counts[j] * h.gamma[j][f];
            ASSERT_GT(h.delta[j][f], 0.0);
        }
        ASSERT_NEAR(s, 0.0, 1e-8);
        for (const auto& img : h.images) ASSERT_TRUE(std::isfinite(img[f]));
    }
}

TEST(TensorCombat, RejectsMismatchedStore) {
    const auto [data, truth] = simulate_study(site_sim(5));
    auto store = constant_store(data, 0.0, std::vector<double>(data.n_covariates(), 0.0),
                                std::vector<double>(data.n_scanners(), 0.0),
                                std::vector<double>(data.n_scanners(), 1.0));
    auto empty = store;
    empty.draws = 0;
    EXPECT_THROW(tensor_combat_adjust(data, empty), DataError);
    auto renamed = store;
    renamed.scanner_names[0] = "elsewhere";
    EXPECT_THROW(tensor_combat_adjust(data, renamed), DataError);
    auto small = null_site_sim(5);
    small.dims = Dims(4, 4, 4);
    const auto [other, t2] = simulate_study(small);
    EXPECT_THROW(tensor_combat_adjust(other, store), DimsError);
}

TEST(TensorCombat, UnfittedVoxelsPassThrough) {
    const auto [data, truth] = simulate_study(site_sim(6));
    auto store = constant_store(data, 0.0, std::vector<double>(data.n_covariates(), 0.0),
                                std::vector<double>(data.n_scanners(), 0.0),
                                std::vector<double>(data.n_scanners(), 1.0));
    store.gamma[0].assign(store.voxels(), 2.0);
    store.fitted[0] = 0;
    const auto h = tensor_combat_adjust(data, store);
    const auto f0 = data.mask().voxels()[0], f1 = data.mask().voxels()[1];
    for (std::size_t i = 0; i < data.n_images(); ++i) {
        EXPECT_EQ(h.images[i][f0], data.image(i)[f0]);
        if (data.scanner_of(i) == 0) EXPECT_NEAR(h.images[i][f1], data.image(i)[f1] - 2.0, 1e-12);
    }
    EXPECT_EQ(h.adjusted[0], 0);
}

// ---------------------------------------------------------------------------
// ComBat

TEST(Combat, HandComputedLocationScaleWithoutShrinkage) {
    // Voxel 0: site a {1, 3}, site b {6, 10}. Grand mean 5, pooled variance 10/4.
    // Standardized site variances 0.8 and 3.2. Voxel 1 is voxel 0 shifted by 100.
    const auto data = oracle::make_dataset(Dims(1, 2), {{1, 101}, {3, 103}, {6, 106}, {10, 110}}, {"a", "a", "b", "b"});
    CombatOptions opt;
    opt.empirical_bayes = false;
    const auto prm = combat_fit(data, opt);
    EXPECT_NEAR(prm.alpha[0], 5.0, 1e-12);
    EXPECT_NEAR(prm.var_pooled[0], 2.5, 1e-12);
    EXPECT_NEAR(prm.delta2_hat(0, 0), 0.8, 1e-12);
    EXPECT_NEAR(prm.delta2_hat(1, 0), 3.2, 1e-12);
    const auto h = combat_adjust(data, prm);
    const double e = 1.0 / std::sqrt(0.8);
    const double expect[4] = {5 - e, 5 + e, 5 - e, 5 + e};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(h.images[i][0], expect[i], 1e-12) << i;
        EXPECT_NEAR(h.images[i][1], expect[i] + 100.0, 1e-10) << i;
    }
}

TEST(Combat, EmpiricalBayesShrinksTowardsThePrior) {
    const auto [data, truth] = simulate_study(null_site_sim(7));
    const auto prm = combat_fit(data);
    EXPECT_TRUE(prm.converged);
    std::size_t shrunk = 0, total = 0;
    for (Eigen::Index j = 0; j < prm.gamma_hat.rows(); ++j)
        for (Eigen::Index v = 0; v < prm.gamma_hat.cols(); ++v) {
            ++total;
            shrunk += std::abs(prm.gamma_star(j, v)) < std::abs(prm.gamma_hat(j, v));
        }
    EXPECT_GE(static_cast<double>(shrunk), 0.95 * static_cast<double>(total));
    for (Eigen::Index j = 0; j < prm.delta2_star.rows(); ++j)
        for (Eigen::Index v = 0; v < prm.delta2_star.cols(); ++v) ASSERT_GT(prm.delta2_star(j, v), 0.0);
}

TEST(Combat, SecondPassFindsNoResidualSiteEffect) {
    const auto [data, truth] = simulate_study(site_sim(8));
    const auto first = combat_fit(data);
    const auto once = combat_adjust(data, first).apply_to(data);
    const auto second = combat_fit(once);
    EXPECT_LT(mean_abs(second.gamma_hat), 0.05 * mean_abs(first.gamma_hat));
}

TEST(Combat, ZeroVarianceScannerIsFlooredWithWarning) {
    const auto data = oracle::make_dataset(Dims(1, 2), {{1, 2}, {1, 5}, {4, 3}, {6, 9}}, {"a", "a", "b", "b"});
    CombatOptions opt;
    opt.empirical_bayes = false;
    const auto prm = combat_fit(data, opt);
    EXPECT_EQ(prm.delta2_hat(0, 0), 1e-6);
    EXPECT_GE(prm.warnings, 1u);
}

TEST(Combat, RequiresTwoImagesPerScanner) {
    const auto data = oracle::make_dataset(Dims(1, 2), {{1, 2}, {1, 5}, {4, 3}}, {"a", "a", "b"});
    EXPECT_THROW(combat_fit(data), DataError);
}

// ---------------------------------------------------------------------------
// Residual baselines

TEST(Residuals, NoiselessSiteShiftIsRecovered) {
    // y = 1 + 2 x + c [site b]; x balanced across sites.
    const double c = 1.75;
    const std::vector<double> xs{-1.0, 0.0, 2.0, -1.0, 0.0, 2.0};
    std::vector<std::vector<double>> imgs;
    std::vector<std::string> sc;
    Eigen::MatrixXd x(6, 1);
    for (std::size_t i = 0; i < 6; ++i) {
        const double y = 1.0 + 2.0 * xs[i] + (i >= 3 ? c : 0.0);
        imgs.push_back({y, 2 * y});
        sc.push_back(i >= 3 ? "b" : "a");
        x(static_cast<Eigen::Index>(i), 0) = xs[i];
    }
    const auto data = oracle::make_dataset(Dims(1, 2), imgs, sc, x);
    const auto h = adjusted_residuals(data);
    EXPECT_NEAR(h.gamma[1][0] - h.gamma[0][0], c, 1e-10);
    EXPECT_NEAR(h.gamma[1][1] - h.gamma[0][1], 2 * c, 1e-10);
    for (std::size_t v = 0; v < 2; ++v) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            ma += h.images[i][v] / 3.0;
            mb += h.images[i + 3][v] / 3.0;
        }
        EXPECT_NEAR(ma, mb, 1e-10);
    }
    // The literal variant also strips the covariate part, leaving constant images.
    ResidualOptions strip;
    strip.remove_covariates = true;
    const auto r = adjusted_residuals(data, strip);
    for (std::size_t i = 1; i < 6; ++i) EXPECT_NEAR(r.images[i][0], r.images[0][0], 1e-10);
}

TEST(Residuals, AdjustedEqualsUnadjustedWithoutCovariates) {
    const auto data = oracle::make_dataset(Dims(2, 2), {{1, 2, 3, 4}, {2, 2, 1, 0}, {5, 1, 2, 2}, {0, 3, 3, 1}, {2, 2, 2, 9}},
                                           {"a", "a", "b", "b", "b"});
    const auto a = adjusted_residuals(data), u = unadjusted_residuals(data);
    for (std::size_t i = 0; i < data.n_images(); ++i)
        for (std::size_t f = 0; f < 4; ++f) EXPECT_NEAR(a.images[i][f], u.images[i][f], 1e-12);
    EXPECT_EQ(u.method, "ua");
}

TEST(Residuals, MatchesNormalEquationsOracle) {
    RngStream rng(12);
    const std::size_t n = 14, p = 5;
    Eigen::MatrixXd x(n, 2);
    std::vector<std::vector<double>> imgs(n, std::vector<double>(p));
    std::vector<std::string> sc;
    for (std::size_t i = 0; i < n; ++i) {
        x(static_cast<Eigen::Index>(i), 0) = rng.standard_normal();
        x(static_cast<Eigen::Index>(i), 1) = rng.uniform() < 0.5 ? 1.0 : 0.0;
        for (auto& v : imgs[i]) v = rng.standard_normal();
        sc.push_back(i % 3 == 0 ? "a" : (i % 3 == 1 ? "b" : "c"));
    }
    const auto data = oracle::make_dataset(Dims(1, 5), imgs, sc, x);
    const auto h = adjusted_residuals(data);

    // Cell-means coding: one indicator per scanner plus the covariates.
    const std::size_t k = 3;
    Eigen::MatrixXd design = Eigen::MatrixXd::Zero(n, k + 2);
    for (std::size_t i = 0; i < n; ++i) design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(data.scanner_of(i))) = 1.0;
    design.rightCols(2) = data.covariates();
    const auto counts = data.images_per_scanner();
    for (std::size_t v = 0; v < p; ++v) {
        Eigen::VectorXd y(n);
        for (std::size_t i = 0; i < n; ++i) y(static_cast<Eigen::Index>(i)) = imgs[i][v];
        const Eigen::VectorXd b = (design.transpose() * design).ldlt().solve(design.transpose() * y);
        double wmean = 0.0;
        for (std::size_t j = 0; j < k; ++j) wmean += counts[j] * b(static_cast<Eigen::Index>(j)) / n;
        for (std::size_t j = 0; j < k; ++j) EXPECT_NEAR(h.gamma[j][v], b(static_cast<Eigen::Index>(j)) - wmean, 1e-9);
        EXPECT_NEAR(h.theta[0][v], b(3), 1e-9);
        EXPECT_NEAR(h.theta[1][v], b(4), 1e-9);
    }
    // No global drift: the overall mean image is unchanged.
    for (std::size_t v = 0; v < p; ++v) {
        double before = 0.0, after = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            before += imgs[i][v];
            after += h.images[i][v];
        }
        EXPECT_NEAR(before, after, 1e-9);
    }
}

TEST(Residuals, RankDeficientDesignPassesThrough) {
    // The covariate duplicates the scanner indicator.
    const Eigen::MatrixXd x = (Eigen::MatrixXd(5, 1) << 0, 0, 1, 1, 1).finished();
    const auto data = oracle::make_dataset(Dims(1, 2), {{1, 2}, {2, 3}, {5, 1}, {0, 3}, {2, 2}}, {"a", "a", "b", "b", "b"}, x);
    const auto h = adjusted_residuals(data);
    for (auto a : h.adjusted) EXPECT_EQ(a, 0);
    for (std::size_t i = 0; i < data.n_images(); ++i) EXPECT_EQ(h.images[i][0], data.image(i)[0]);
}

TEST(Harmonizers, PreserveMaskAndShape) {
    auto sim = site_sim(9);
    sim.dims = Dims(5, 5, 3);
    const auto [full, truth] = simulate_study(sim);
    std::vector<std::uint8_t> bits(sim.dims.size(), 1);
    for (std::size_t f = 0; f < bits.size(); f += 4) bits[f] = 0;
    auto mask = std::make_shared<const Mask>(sim.dims, bits);
    std::vector<Tensor3> imgs;
    for (const auto& img : full.images()) {
        Tensor3 t(mask);
        for (auto f : mask->voxels()) t.set_flat(f, img[f]);
        imgs.push_back(t);
    }
    const StudyDataset data(mask, imgs, full.records(), [&] {
        std::vector<std::string> s;
        for (std::size_t i = 0; i < full.n_images(); ++i) s.push_back(full.scanner_names()[full.scanner_of(i)]);
        return s;
    }(), full.covariate_names(), full.raw_covariates());
    SamplerConfig cfg;
    cfg.iters = 30;
    cfg.burn_in = 10;
    cfg.seed = 9;
    const std::vector<HarmonizationOutput> outs{tensor_combat_adjust(data, fit(data, cfg)),
                                                combat_adjust(data, combat_fit(data)), adjusted_residuals(data),
                                                unadjusted_residuals(data), no_harmonization(data)};
    for (const auto& h : outs) {
        ASSERT_EQ(h.images.size(), data.n_images()) << h.method;
        for (const auto& img : h.images) {
            ASSERT_TRUE(img.mask() == *mask) << h.method;
            for (std::size_t f = 0; f < bits.size(); ++f)
                if (!bits[f]) ASSERT_EQ(img[f], 0.0) << h.method;
        }
    }
}
