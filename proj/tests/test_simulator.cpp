#include <gtest/gtest.h>

#include <cmath>

#include "tcombat/errors.hpp"
#include "tcombat/evaluation.hpp"
#include "tcombat/linalg.hpp"
#include "tcombat/simulator.hpp"

using namespace tcombat;

namespace {

std::vector<double> vals(const Tensor3& t) { return {t.values().begin(), t.values().end()}; }

SimConfig small(std::uint64_t seed = 1) {
    SimConfig s;
    s.dims = Dims(6, 5, 4);
    s.subjects = 30;
    s.scanners = 3;
    s.seed = seed;
    return s;
}

}  // namespace

TEST(Simulator, NoiselessSingleScannerWithoutCovariatesIsTheMean) {
    auto cfg = small();
    cfg.noise_sd = 0.0;
    cfg.covariates = 0;
    cfg.scanners = 1;
    const auto [data, truth] = simulate_study(cfg);
    for (const auto& img : data.images())
        for (auto f : data.mask().voxels()) ASSERT_EQ(img[f], truth.mu[f]);

    cfg.longitudinal = true;
    const auto [lon, lt] = simulate_study(cfg);
    for (std::size_t i = 0; i < lon.n_images(); ++i)
        for (auto f : lon.mask().voxels())
            ASSERT_NEAR(lon.image(i)[f], lt.mu[f] + lt.subject[lon.subject_of(i)][f], 1e-12);
}

TEST(Simulator, SameSeedIsBitwiseIdentical) {
    const auto [a, ta] = simulate_study(small(7));
    const auto [b, tb] = simulate_study(small(7));
    const auto [c, tc] = simulate_study(small(8));
    ASSERT_EQ(a.n_images(), b.n_images());
    bool differs = false;
    for (std::size_t i = 0; i < a.n_images(); ++i) {
        ASSERT_EQ(vals(a.image(i)), vals(b.image(i)));
        differs |= vals(a.image(i)) != vals(c.image(i));
    }
    EXPECT_EQ(a.raw_covariates(), b.raw_covariates());
    EXPECT_TRUE(differs);
}

TEST(Simulator, TruthReconstructsEveryImageExactly) {
    for (bool lon : {false, true}) {
        auto cfg = small(3);
        cfg.longitudinal = lon;
        cfg.time_effect = lon ? 0.5 : 0.0;
        const auto [data, truth] = simulate_study(cfg);
        for (std::size_t i = 0; i < data.n_images(); ++i) {
            const auto r = reconstruct_image(truth, data, i);
            for (auto f : data.mask().voxels()) ASSERT_EQ(r[f], data.image(i)[f]) << "image " << i;
        }
    }
}

TEST(Simulator, ScannerMapsAreWeightedZeroMeanAndScalesPositive) {
    auto cfg = small(4);
    cfg.longitudinal = true;
    cfg.visits = 3;
    const auto [data, truth] = simulate_study(cfg);
    const auto counts = data.images_per_scanner();
    std::size_t total = 0;
    for (auto c : counts) total += c;
    EXPECT_EQ(total, data.n_images());
    for (auto f : data.mask().voxels()) {
        double s = 0.0;
        for (std::size_t j = 0; j < counts.size(); ++j) {
            s += counts[j] * truth.gamma[j][f];
            ASSERT_GT(truth.delta[j][f], 0.0);
        }
        ASSERT_NEAR(s, 0.0, 1e-10);
    }
}

TEST(Simulator, LeastSquaresRecoversCovariateMapsFromNoiselessImages) {
    auto cfg = small(5);
    cfg.noise_sd = 0.0;
    const auto [data, truth] = simulate_study(cfg);
    const auto n = static_cast<Eigen::Index>(data.n_images());
    const auto k = static_cast<Eigen::Index>(data.n_scanners());
    const auto q = static_cast<Eigen::Index>(data.n_covariates());
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, k + q);
    for (Eigen::Index i = 0; i < n; ++i) x(i, static_cast<Eigen::Index>(data.scanner_of(static_cast<std::size_t>(i)))) = 1.0;
    x.rightCols(q) = data.raw_covariates();
    const auto y = image_matrix(data);
    const Eigen::MatrixXd coef = x.colPivHouseholderQr().solve(Eigen::MatrixXd(y));
    const auto& vox = data.mask().voxels();
    for (Eigen::Index s = 0; s < q; ++s)
        for (std::size_t v = 0; v < vox.size(); ++v)
            ASSERT_NEAR(coef(k + s, static_cast<Eigen::Index>(v)), truth.theta[static_cast<std::size_t>(s)][vox[v]], 1e-8);
}

TEST(Simulator, ScannerMeansApproachScannerMaps) {
    auto cfg = small(6);
    cfg.subjects = 900;
    cfg.covariates = 0;
    const auto [data, truth] = simulate_study(cfg);
    const auto counts = data.images_per_scanner();
    const auto& vox = data.mask().voxels();
    const double n = static_cast<double>(data.n_images());
    std::size_t ok = 0, total = 0;
    for (auto f : vox) {
        double grand = 0.0;
        std::vector<double> m(counts.size(), 0.0), ss(counts.size(), 0.0);
        for (std::size_t i = 0; i < data.n_images(); ++i) {
            grand += data.image(i)[f] / n;
            m[data.scanner_of(i)] += data.image(i)[f] / counts[data.scanner_of(i)];
        }
        double pooled = 0.0;
        for (std::size_t i = 0; i < data.n_images(); ++i) {
            const double d = data.image(i)[f] - m[data.scanner_of(i)];
            pooled += d * d;
        }
        const double sd = std::sqrt(pooled / (n - counts.size()));
        for (std::size_t j = 0; j < counts.size(); ++j) {
            ++total;
            ok += std::abs(m[j] - grand - truth.gamma[j][f]) <= 3.0 * sd / std::sqrt(counts[j]);
        }
    }
    EXPECT_GE(static_cast<double>(ok), 0.99 * total);
}

TEST(Simulator, DefaultConfigHasPowerInsideTheBlock) {
    double flagged = 0.0;
    const int reps = 20;
    for (int r = 0; r < reps; ++r) {
        SimConfig cfg;
        cfg.seed = 100 + r;
        const auto [data, truth] = simulate_study(cfg);
        const auto test = anova_per_voxel(data.images(), data.scanner_of_images());
        std::size_t inside = 0, hits = 0;
        for (auto f : data.mask().voxels())
            if (truth.block[f] > 0.5) {
                ++inside;
                hits += test.p_value[f] < 0.05;
            }
        ASSERT_GT(inside, 0u);
        flagged += static_cast<double>(hits) / inside / reps;
    }
    EXPECT_GE(flagged, 0.5);
}

TEST(Simulator, RejectsInfeasibleConfigs) {
    auto cfg = small();
    cfg.scanners = 40;
    EXPECT_THROW(simulate_study(cfg), ConfigError);
    cfg = small();
    cfg.snr = 0.0;
    EXPECT_THROW(simulate_study(cfg), ConfigError);
}
