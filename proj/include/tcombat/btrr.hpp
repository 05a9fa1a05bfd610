#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tcombat/dataset.hpp"
#include "tcombat/random.hpp"
#include "tcombat/tensor.hpp"

namespace tcombat {

class BinaryWriter;
class BinaryReader;

struct SamplerConfig {
    std::size_t rank = 5;
    std::size_t n_mixture = 10;
    std::size_t iters = 3000;
    std::size_t burn_in = 1000;
    std::size_t thin = 2;

    double a_tau = 1.0, b_tau = 1.0;
    double a_lambda = 1.0, b_lambda = 1.0;
    double a_eps = 2.5;
    /// Defaults to half the pooled residual variance of an OLS pre-fit.
    std::optional<double> b_eps;
    double a_alpha = 1.0, b_alpha = 1.0;
    double a_pi = 1.0;
    double mh_proposal_var = 0.25;

    bool longitudinal = false;
    bool time_interactions = false;
    /// 1-based axis for slice-by-slice fitting.
    std::size_t slice_axis = 3;
    double min_slice_fraction = 0.05;

    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    /// Write a checkpoint every N sweeps (0 disables). Requires checkpoint_path.
    std::size_t checkpoint_every = 0;
    std::string checkpoint_path;
    /// Stop after this many sweeps (0 = run to completion). Used to emulate an
    /// interrupted run; a checkpoint is written at the stop point.
    std::size_t stop_after = 0;

    /// Hold w, lambda, alpha and tau at their initial values.
    bool freeze_hyper = false;
    /// Hold the noise mixture at its initial values.
    bool freeze_noise = false;
    /// Start the margins from a low-rank fit of the OLS pre-fit maps (plus the
    /// usual N(0, 0.01) jitter). Off: jitter only.
    bool ols_warm_start = true;

    void validate() const;
    std::size_t retained_draws() const { return (iters - burn_in) / thin; }
};

enum class Family : std::uint8_t { mu = 0, theta = 1, gamma = 2, subject = 3 };

const char* family_name(Family f);

/// One coefficient tensor: mu, theta_s, gamma_j or b_i.
struct TermRef {
    Family family = Family::mu;
    std::size_t index = 0;
    bool operator==(const TermRef&) const = default;
};

struct MarginHyper {
    double w = 2.0;
    double lambda = 1.0;
    double alpha = 1.0;
    bool operator==(const MarginHyper&) const = default;
};

struct TensorTerm {
    ParafacCoefficient coef;
    std::vector<MarginHyper> hyper;  // index r * D + d

    MarginHyper& at(std::size_t r, std::size_t d) { return hyper[r * coef.order() + d]; }
    const MarginHyper& at(std::size_t r, std::size_t d) const { return hyper[r * coef.order() + d]; }
    bool operator==(const TensorTerm&) const = default;
};

/// Terms sharing one global scale tau (mu; each theta_s; all gamma_j; all b_i).
struct TermGroup {
    std::vector<TensorTerm> terms;
    double tau = 1.0;
    bool operator==(const TermGroup&) const = default;
};

/// Scanner-level finite mixture over voxel noise variances.
struct NoiseModel {
    std::size_t components = 1;
    std::vector<std::vector<double>> s2;             // K x H
    std::vector<std::vector<double>> weights;        // K x H
    std::vector<std::vector<std::uint32_t>> labels;  // K x P (compact voxels)

    double variance(std::size_t scanner, std::size_t voxel) const {
        return s2[scanner][labels[scanner][voxel]];
    }
    bool operator==(const NoiseModel&) const = default;
};

struct ModelState {
    TermGroup mu;
    std::vector<TermGroup> theta;  // one group per covariate
    TermGroup gamma;               // one term per scanner (empty when K == 1)
    TermGroup subject;             // one term per subject (longitudinal only)
    NoiseModel noise;

    TermGroup& group(Family f, std::size_t index = 0);
    const TermGroup& group(Family f, std::size_t index = 0) const;
    TensorTerm& term(TermRef ref);
    const TensorTerm& term(TermRef ref) const;
    bool operator==(const ModelState&) const = default;
};

/// Retained posterior draws on the compact voxels of `mask`. Scanner and
/// subject effects are re-centered per draw (n_j-weighted mean of gamma and
/// mean of b are zero at each voxel) with the removed mean moved into mu.
struct PosteriorStore {
    MaskPtr mask;
    std::size_t n_scanners = 0;
    std::vector<std::string> scanner_names;
    std::vector<std::size_t> images_per_scanner;
    std::vector<std::string> covariate_names;  // effective design columns
    std::vector<std::string> subject_names;
    bool longitudinal = false;
    bool time_interactions = false;

    std::size_t draws = 0;
    std::vector<double> mu;                  // draws x P
    std::vector<std::vector<double>> theta;  // q x (draws x P)
    std::vector<std::vector<double>> gamma;  // K x (draws x P)
    std::vector<std::vector<double>> sigma2; // K x (draws x P)
    std::vector<std::vector<double>> subject_mean;  // n_subj x P (longitudinal)
    std::vector<std::uint8_t> fitted;        // per compact voxel; 0 = not harmonized

    std::vector<std::string> alpha_labels;
    std::vector<std::uint64_t> alpha_accepted;
    std::vector<std::uint64_t> alpha_proposed;
    std::vector<double> trace;               // log residual sum of squares per sweep
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t clamp_warnings = 0;
    /// False when the run stopped early (stop_after); draws < retained_draws().
    bool complete = true;

    std::size_t voxels() const { return mask ? mask->count() : 0; }
    std::span<const double> draw(const std::vector<double>& field, std::size_t t) const {
        return {field.data() + t * voxels(), voxels()};
    }
    /// Posterior mean map of a draws x P field.
    std::vector<double> mean(const std::vector<double>& field) const;
    /// Posterior mean of the noise standard deviation for scanner j.
    std::vector<double> mean_sd(std::size_t scanner) const;
    double acceptance_rate(std::size_t chain) const;

    void write(BinaryWriter& out) const;
    static PosteriorStore read(BinaryReader& in);
    bool operator==(const PosteriorStore& other) const;
};

struct MarginConditional {
    double mean = 0.0;
    double var = 0.0;
};

/// Gibbs sampler for the tensor response regression with PARAFAC coefficients,
/// AR-1 margin priors and a scanner-level noise mixture.
class BtrrSampler {
public:
    BtrrSampler(const StudyDataset& data, SamplerConfig config);

    const SamplerConfig& config() const { return config_; }
    const StudyDataset& data() const { return data_; }
    ModelState& state() { return state_; }
    const ModelState& state() const { return state_; }
    RngStream& rng() { return rng_; }
    std::size_t iteration() const { return iteration_; }

    /// Every coefficient term in sweep order.
    const std::vector<TermRef>& terms() const { return terms_; }

    /// Full conditional of margin element k of mode d, channel r.
    MarginConditional margin_conditional(TermRef ref, std::size_t d, std::size_t r, std::size_t k);

    /// Gibbs scan over the elements of one margin; residuals updated in place.
    void update_margin(TermRef ref, std::size_t d, std::size_t r);
    double update_w(TermRef ref, std::size_t d, std::size_t r);
    /// Scale statistic c of the w conditional (before clamping).
    double w_statistic(TermRef ref, std::size_t d, std::size_t r) const;
    double update_lambda(TermRef ref, std::size_t d, std::size_t r);
    double update_tau(Family family, std::size_t group_index = 0);
    /// Chi statistic of the tau conditional for a group.
    double tau_statistic(Family family, std::size_t group_index = 0) const;
    /// Returns true when the proposal was accepted.
    bool update_alpha(TermRef ref, std::size_t d, std::size_t r);
    double alpha_log_target(TermRef ref, std::size_t d, std::size_t r, double alpha) const;
    void update_noise_mixture();

    /// One full pass over all terms, channels and modes, then the noise mixture.
    void sweep();

    /// Rebuilds residuals Y - fit from the current state.
    void recompute_residuals();
    /// Largest |cached - recomputed| residual, relative to max(1, |Y|).
    double residual_drift() const;
    double residual_sum_of_squares() const;
    /// Compact residual of image i.
    std::span<const double> residual(std::size_t image) const {
        return {residual_.data() + image * n_vox_, n_vox_};
    }
    /// Compact fitted value of a term at the current state.
    std::vector<double> term_map(TermRef ref) const;

    /// Resets the model state to the documented initialization.
    void initialize();
    void refresh_precisions();

    std::uint64_t clamp_warnings() const { return clamp_warnings_; }
    const std::vector<std::uint64_t>& alpha_accepted() const { return alpha_accepted_; }
    const std::vector<std::uint64_t>& alpha_proposed() const { return alpha_proposed_; }
    std::vector<std::string> alpha_labels() const;

    void write_state(BinaryWriter& out) const;
    void read_state(BinaryReader& in);

private:
    /// Adds a masked rank-R ALS approximation of `target` to the margins.
    void add_low_rank(ParafacCoefficient& coef, std::vector<double> target) const;

    struct Design {
        std::vector<std::size_t> images;
        std::vector<double> weights;
    };

    std::size_t term_slot(TermRef ref) const;
    std::size_t alpha_slot(TermRef ref, std::size_t d, std::size_t r) const;
    void channel_aggregates(TermRef ref, std::size_t r, std::vector<double>& a,
                            std::vector<double>& b, std::vector<double>& channel) const;
    void channel_values(const ParafacCoefficient& coef, std::size_t r, std::vector<double>& out) const;
    void data_terms(const ParafacCoefficient& coef, std::size_t r, std::size_t d,
                    const std::vector<double>& a, const std::vector<double>& b,
                    std::vector<double>& n_k, std::vector<double>& m_k) const;
    MarginConditional conditional_from(const TensorTerm& term, double tau, std::size_t d, std::size_t r,
                                       std::size_t k, double n_k, double m_k) const;
    void update_channel(TermRef ref, std::size_t r);
    void update_margin_with(TermRef ref, std::size_t d, std::size_t r, const std::vector<double>& a,
                            const std::vector<double>& b);

    const StudyDataset& data_;
    SamplerConfig config_;
    ModelState state_;
    RngStream rng_;
    std::size_t iteration_ = 0;

    std::size_t n_img_ = 0, n_vox_ = 0, order_ = 0;
    std::vector<std::size_t> mode_sizes_;
    std::vector<std::vector<std::uint32_t>> mode_index_;  // D x P
    std::vector<double> y_;          // N x P
    std::vector<double> residual_;   // N x P
    std::vector<double> precision_;  // K x P
    std::vector<TermRef> terms_;
    std::vector<Design> designs_;
    std::vector<std::vector<std::size_t>> scanner_images_;
    std::vector<std::uint64_t> alpha_accepted_, alpha_proposed_;
    std::vector<std::size_t> alpha_offset_;
    std::uint64_t clamp_warnings_ = 0;

    friend PosteriorStore fit(const StudyDataset&, const SamplerConfig&);
    friend PosteriorStore resume(const std::string&, const StudyDataset&, std::size_t);
    friend class FitDriver;
};

/// Runs burn-in and retained sweeps; longitudinal configs add subject terms
/// and visit-time covariates.
PosteriorStore fit(const StudyDataset& dataset, const SamplerConfig& config);

/// Independent 2D fits per slice along config.slice_axis, re-stacked into the
/// volume. Slices with fewer than min_slice_fraction unmasked voxels are skipped.
PosteriorStore fit_slicewise(const StudyDataset& dataset, const SamplerConfig& config);

/// Several independent chains (stream ids stream_id .. stream_id + chains - 1)
/// run concurrently and pooled.
PosteriorStore fit_chains(const StudyDataset& dataset, const SamplerConfig& config, std::size_t chains,
                          bool slicewise = false);

/// Continues an interrupted chain from its checkpoint. `iters_override` > 0
/// replaces the configured iteration count.
PosteriorStore resume(const std::string& checkpoint_path, const StudyDataset& dataset,
                      std::size_t iters_override = 0);

/// Stream id used for slice `index` of a slicewise fit.
std::uint64_t slice_stream_id(const SamplerConfig& config, std::size_t index);

/// Content hash of images, mask, design and covariates.
std::uint64_t dataset_fingerprint(const StudyDataset& dataset);

/// Hash of every config field that affects the chain.
std::uint64_t config_hash(const SamplerConfig& config);

/// Reads config and iteration from a checkpoint header.
SamplerConfig checkpoint_config(const std::string& checkpoint_path, std::size_t* iteration = nullptr);

}  // namespace tcombat
