#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcombat/dataset.hpp"
#include "tcombat/tensor.hpp"

namespace tcombat {

/// Synthetic multi-site study. Scanner maps are a smooth rank-`gamma_rank`
/// PARAFAC part plus a constant-amplitude block in a sub-cuboid; both parts
/// have an n_j-weighted zero mean at every voxel.
struct SimConfig {
    Dims dims{8, 8, 8};
    std::size_t subjects = 60;
    std::size_t scanners = 5;
    std::size_t visits = 2;
    double visit_interval_months = 12.0;

    /// Column 0 is a standard-normal age-like variable, the rest Bernoulli(binary_rate).
    std::size_t covariates = 3;
    double binary_rate = 0.4;
    /// Peak amplitude of each covariate template; missing entries use the last value.
    std::vector<double> effect_amplitudes{1.0, 0.6, 0.6};
    /// Age increment per visit (in covariate units).
    double age_per_visit = 0.1;

    double mean_level = 3.0;
    double mean_bump = 1.0;

    std::size_t gamma_rank = 2;
    double gamma_amplitude = 1.0;
    double block_amplitude = 1.0;
    /// Block side length as a fraction of each extent.
    double block_fraction = 0.375;

    double delta_low = 0.7;
    double delta_high = 1.4;

    double snr = 2.0;
    /// Overrides the SNR rule noise_sd = rms(Gamma) / snr.
    std::optional<double> noise_sd;

    bool longitudinal = false;
    double subject_sd = 0.5;
    /// Peak amplitude of a visit_months effect (per 12 months), longitudinal only.
    double time_effect = 0.0;

    std::uint64_t seed = 1;

    void validate() const;
};

struct GroundTruth {
    Tensor3 mu;
    std::vector<Tensor3> theta;      // per covariate (raw units)
    Tensor3 theta_time;              // visit_months effect per month
    std::vector<Tensor3> gamma;      // per scanner
    std::vector<Tensor3> subject;    // per subject (longitudinal)
    std::vector<Tensor3> delta;      // per scanner
    std::vector<Tensor3> epsilon;    // per image, noise before scanner scaling
    Tensor3 block;                   // 1 inside the localized scanner block
    double noise_sd = 0.0;
    std::vector<std::string> scanner_names;
    std::vector<std::string> subject_names;
    std::vector<std::size_t> scanner_of_subject;
    std::vector<double> block_levels;  // centered block amplitude per scanner
};

std::pair<StudyDataset, GroundTruth> simulate_study(const SimConfig& config);

/// Noise-free part of image i plus delta * epsilon, rebuilt from the truth.
Tensor3 reconstruct_image(const GroundTruth& truth, const StudyDataset& data, std::size_t image);

}  // namespace tcombat
