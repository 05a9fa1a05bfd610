#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tcombat/btrr.hpp"
#include "tcombat/dataset.hpp"
#include "tcombat/random.hpp"

namespace tcombat {

// ---------------------------------------------------------------------------
// Scanner-effect metrics

/// Pearson correlation; nullopt when either input is constant.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

struct PairMetric {
    std::size_t first = 0, second = 0;
    std::optional<double> correlation;  // missing when a scanner mean image is constant
    double rmse = 0.0;
};

struct PairwiseScannerReport {
    std::vector<std::string> scanner_names;
    std::vector<PairMetric> pairs;
    /// Per compact voxel: fraction of scanner pairs with a significant additive difference.
    std::vector<double> proportion;
    /// Significant voxel count per pair, aligned with `pairs`.
    std::vector<std::size_t> significant_voxels;
    double alpha_level = 0.05;

    double mean_rmse() const;
    double mean_correlation() const;
};

/// Pearson correlation and RMSE between scanner-mean images over the mask.
PairwiseScannerReport scanner_pairwise_metrics(const std::vector<Tensor3>& images,
                                               const std::vector<std::size_t>& scanner_of,
                                               const std::vector<std::string>& scanner_names);
PairwiseScannerReport scanner_pairwise_metrics(const StudyDataset& data);

struct VoxelTest {
    Tensor3 p_value;
    std::vector<double> statistic;       // compact
    std::vector<std::uint8_t> degenerate;  // compact; zero within-group variance
    double fraction_below(double level) const;
};

VoxelTest anova_per_voxel(const std::vector<Tensor3>& images, const std::vector<std::size_t>& scanner_of);
VoxelTest bartlett_per_voxel(const std::vector<Tensor3>& images, const std::vector<std::size_t>& scanner_of);

// ---------------------------------------------------------------------------
// Credible bands

struct SignificanceMap {
    Tensor3 significant;  // 1 on significant voxels, 0 elsewhere
    double q_star = 0.0;
    double alpha_level = 0.05;
    bool bonferroni = false;
    std::vector<double> mean, sd;  // compact

    std::vector<std::uint8_t> flags() const;
    std::size_t count() const;
};

/// Simultaneous band from `draws` (T x P, row-major over compact voxels of `mask`).
/// The default is the max-standardized-deviation band; `bonferroni` switches to
/// per-voxel Gaussian intervals at level alpha / P.
SignificanceMap joint_credible_band(const std::vector<double>& draws, std::size_t n_draws, const MaskPtr& mask,
                                    double alpha_level = 0.05, bool bonferroni = false);

/// Applies the joint band to Gamma_j - Gamma_j' for every scanner pair.
PairwiseScannerReport pairwise_scanner_significance(const PosteriorStore& store, double alpha_level = 0.05,
                                                    bool bonferroni = false);

/// Masked mean per nonzero label; labels without unmasked voxels map to nullopt.
std::map<long, std::optional<double>> roi_aggregate(const Tensor3& image, const Tensor3& labels);

// ---------------------------------------------------------------------------
// Prediction

struct LassoOptions {
    double tolerance = 1e-7;
    std::size_t max_iterations = 10000;
};

struct LassoResult {
    Eigen::VectorXd beta;
    double objective = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    std::vector<double> objective_trace;  // after each full cycle
};

/// Cyclic coordinate descent for (1/2n)||y - X b||^2 + lambda ||b||_1.
LassoResult lasso_cd(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda,
                     const LassoOptions& options = {}, const Eigen::VectorXd* warm_start = nullptr);
double lasso_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& beta, double lambda);

/// Folds assigned per subject, dealt round-robin within each scanner after a shuffle.
std::vector<std::size_t> stratified_folds(const StudyDataset& data, std::size_t folds, RngStream& rng);

struct CvOptions {
    std::size_t outer_folds = 5;
    std::size_t inner_folds = 10;
    std::size_t path_length = 30;
    double path_ratio = 1e-3;
    std::uint64_t seed = 0;
    LassoOptions lasso{1e-7, 2000};
};

struct CvResult {
    std::vector<double> fold_rmse;
    double rmse = 0.0;  // pooled over all held-out images
    double lambda = 0.0;
    std::vector<std::size_t> fold_of_image;
    std::uint64_t nonconverged = 0;
};

/// Predicts `target` from masked voxel values. lambda is chosen by inner
/// cross-validation over a geometric path; RMSE comes from the outer folds.
CvResult kfold_cv_predict(const StudyDataset& data, const Eigen::VectorXd& target, const CvOptions& options = {});

// ---------------------------------------------------------------------------
// Reproducibility

double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);
double dice(const Tensor3& a, const Tensor3& b);

struct SplitResult {
    std::vector<std::size_t> first, second;  // image indices
    std::uint64_t warnings = 0;              // scanners with a single subject
};

/// Subject-level split, stratified by scanner.
SplitResult matched_split(const StudyDataset& data, double fraction, RngStream& rng);

struct DiceReport {
    std::vector<std::string> covariates;
    std::vector<double> dice_first, dice_second;
    std::vector<std::size_t> count_full, count_first, count_second;
};

/// Dice of each covariate's significance map from the two split fits against the full fit.
DiceReport reproducibility_dice(const PosteriorStore& first, const PosteriorStore& second,
                                const PosteriorStore& full, double alpha_level = 0.05);

/// Splits, fits the regression (scanner terms dropped) on both halves and the
/// full data, and returns the Dice table.
DiceReport reproducibility_pipeline(const StudyDataset& data, const SamplerConfig& config, double fraction,
                                    double alpha_level, std::uint64_t split_seed);

// ---------------------------------------------------------------------------
// Screening and tests

/// Keeps voxels zero in at most `zero_fraction_threshold` of images and with
/// nonzero variance, intersected with the images' mask.
MaskPtr voxel_screen(const std::vector<Tensor3>& images, double zero_fraction_threshold = 0.75);

struct TTestResult {
    double mean_difference = 0.0;
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;  // two-sided
};

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Benjamini-Hochberg adjusted p-values.
std::vector<double> benjamini_hochberg(const std::vector<double>& p_values);

}  // namespace tcombat
