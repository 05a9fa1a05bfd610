#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tcombat/btrr.hpp"
#include "tcombat/dataset.hpp"

namespace tcombat {

struct HarmonizationOutput {
    std::string method;
    std::vector<Tensor3> images;
    Tensor3 mu;
    std::vector<Tensor3> theta;  // per covariate column of the fitted design
    std::vector<Tensor3> gamma;  // per scanner
    std::vector<Tensor3> delta;  // per scanner
    /// Per compact voxel: 1 when the voxel was adjusted, 0 when passed through.
    std::vector<std::uint8_t> adjusted;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::size_t draws = 0;
    std::uint64_t warnings = 0;

    StudyDataset apply_to(const StudyDataset& data) const { return data.with_images(images); }
};

/// Posterior-mean location/scale adjustment using a fitted store.
HarmonizationOutput tensor_combat_adjust(const StudyDataset& data, const PosteriorStore& store);

struct CombatOptions {
    bool empirical_bayes = true;
    double tolerance = 1e-6;
    std::size_t max_iterations = 100;
    double delta_floor = 1e-6;
};

struct CombatEBParams {
    std::vector<std::string> scanner_names;
    std::vector<double> alpha;        // grand mean per voxel
    Eigen::MatrixXd beta;             // q x P covariate coefficients (standardized covariates)
    std::vector<double> var_pooled;   // P
    Eigen::MatrixXd gamma_hat;        // K x P, no pooling
    Eigen::MatrixXd delta2_hat;       // K x P, no pooling
    Eigen::MatrixXd gamma_star;       // K x P
    Eigen::MatrixXd delta2_star;      // K x P
    std::vector<double> gamma_bar, tau2_bar, lambda_bar, theta_bar;  // per scanner
    /// Prior variance of the covariate coefficients; least squares corresponds to a flat prior.
    double sigma2_b = std::numeric_limits<double>::infinity();
    bool empirical_bayes = true;
    bool converged = true;
    std::size_t iterations = 0;
    std::uint64_t warnings = 0;
    std::vector<std::uint8_t> usable;  // per voxel; 0 when pooled variance is zero
};

CombatEBParams combat_fit(const StudyDataset& data, const CombatOptions& options = {});
HarmonizationOutput combat_adjust(const StudyDataset& data, const CombatEBParams& params);

struct ResidualOptions {
    /// Also subtract the fitted covariate part X beta (the literal adjusted-residual formula).
    bool remove_covariates = false;
};

HarmonizationOutput adjusted_residuals(const StudyDataset& data, const ResidualOptions& options = {});
HarmonizationOutput unadjusted_residuals(const StudyDataset& data);
HarmonizationOutput no_harmonization(const StudyDataset& data);

}  // namespace tcombat
