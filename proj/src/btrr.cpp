#include "tcombat/btrr.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "tcombat/archive.hpp"
#include "tcombat/errors.hpp"

namespace tcombat {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kStoreVersion = 1;
constexpr double kVarGuard = 1e-300;
constexpr double kChiFloor = 1e-10;

void require_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
}

void write_config(BinaryWriter& w, const SamplerConfig& c, bool with_runtime) {
    w.u64(c.rank);
    w.u64(c.n_mixture);
    w.u64(c.iters);
    w.u64(c.burn_in);
    w.u64(c.thin);
    for (double v : {c.a_tau, c.b_tau, c.a_lambda, c.b_lambda, c.a_eps}) w.f64(v);
    w.u8(c.b_eps.has_value());
    w.f64(c.b_eps.value_or(0.0));
    for (double v : {c.a_alpha, c.b_alpha, c.a_pi, c.mh_proposal_var}) w.f64(v);
    w.u8(c.longitudinal);
    w.u8(c.time_interactions);
    w.u64(c.slice_axis);
    w.f64(c.min_slice_fraction);
    w.u64(c.seed);
    w.u64(c.stream_id);
    w.u8(c.freeze_hyper);
    w.u8(c.freeze_noise);
    w.u8(c.ols_warm_start);
    if (with_runtime) {
        w.u64(c.checkpoint_every);
        w.str(c.checkpoint_path);
        w.u64(c.stop_after);
    }
}

SamplerConfig read_config(BinaryReader& r) {
    SamplerConfig c;
    c.rank = r.u64();
    c.n_mixture = r.u64();
    c.iters = r.u64();
    c.burn_in = r.u64();
    c.thin = r.u64();
    c.a_tau = r.f64();
    c.b_tau = r.f64();
    c.a_lambda = r.f64();
    c.b_lambda = r.f64();
    c.a_eps = r.f64();
    const bool has_b = r.u8() != 0;
    const double b = r.f64();
    if (has_b) c.b_eps = b;
    c.a_alpha = r.f64();
    c.b_alpha = r.f64();
    c.a_pi = r.f64();
    c.mh_proposal_var = r.f64();
    c.longitudinal = r.u8() != 0;
    c.time_interactions = r.u8() != 0;
    c.slice_axis = r.u64();
    c.min_slice_fraction = r.f64();
    c.seed = r.u64();
    c.stream_id = r.u64();
    c.freeze_hyper = r.u8() != 0;
    c.freeze_noise = r.u8() != 0;
    c.ols_warm_start = r.u8() != 0;
    c.checkpoint_every = r.u64();
    c.checkpoint_path = r.str();
    c.stop_after = r.u64();
    return c;
}

void write_mask(BinaryWriter& w, const Mask& m) {
    for (std::size_t d = 0; d < 3; ++d) w.u32(static_cast<std::uint32_t>(m.dims()[d]));
    w.u8s(m.bits());
}

MaskPtr read_mask(BinaryReader& r) {
    const std::size_t p1 = r.u32(), p2 = r.u32(), p3 = r.u32();
    auto bits = r.u8s();
    Dims dims(p1, p2, p3);
    if (bits.size() != dims.size()) throw DataError("mask size does not match dims");
    return std::make_shared<const Mask>(dims, std::move(bits));
}

void write_strings(BinaryWriter& w, const std::vector<std::string>& v) {
    w.u64(v.size());
    for (const auto& s : v) w.str(s);
}

std::vector<std::string> read_strings(BinaryReader& r) {
    const auto n = r.u64();
    if (n > r.remaining() / 8) throw DataError("truncated binary payload");
    std::vector<std::string> v(n);
    for (auto& s : v) s = r.str();
    return v;
}

void write_fields(BinaryWriter& w, const std::vector<std::vector<double>>& v) {
    w.u64(v.size());
    for (const auto& f : v) w.f64s(f);
}

std::vector<std::vector<double>> read_fields(BinaryReader& r) {
    const auto n = r.u64();
    if (n > r.remaining() / 8) throw DataError("truncated binary payload");
    std::vector<std::vector<double>> v(n);
    for (auto& f : v) f = r.f64s();
    return v;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

bool same_bits(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!same_bits(a[i], b[i])) return false;
    return true;
}

}  // namespace

void SamplerConfig::validate() const {
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (n_mixture < 1) throw ConfigError("n_mixture must be >= 1");
    if (!(iters > burn_in)) throw ConfigError("iters must exceed burn_in");
    if (thin < 1) throw ConfigError("thin must be >= 1");
    require_positive(a_tau, "a_tau");
    require_positive(b_tau, "b_tau");
    require_positive(a_lambda, "a_lambda");
    require_positive(b_lambda, "b_lambda");
    require_positive(a_eps, "a_eps");
    if (b_eps) require_positive(*b_eps, "b_eps");
    require_positive(a_alpha, "a_alpha");
    require_positive(b_alpha, "b_alpha");
    require_positive(a_pi, "a_pi");
    require_positive(mh_proposal_var, "mh_proposal_var");
    if (slice_axis < 1 || slice_axis > 3) throw ConfigError("slice_axis must be 1, 2 or 3");
    if (!(min_slice_fraction >= 0.0 && min_slice_fraction <= 1.0))
        throw ConfigError("min_slice_fraction must lie in [0, 1]");
    if ((checkpoint_every > 0 || stop_after > 0) && checkpoint_path.empty())
        throw ConfigError("checkpointing requires checkpoint_path");
    if (time_interactions && !longitudinal)
        throw ConfigError("time_interactions requires longitudinal");
}

const char* family_name(Family f) {
    switch (f) {
        case Family::mu: return "mu";
        case Family::theta: return "theta";
        case Family::gamma: return "gamma";
        case Family::subject: return "subject";
    }
    return "?";
}

TermGroup& ModelState::group(Family f, std::size_t index) {
    return const_cast<TermGroup&>(std::as_const(*this).group(f, index));
}

const TermGroup& ModelState::group(Family f, std::size_t index) const {
    switch (f) {
        case Family::mu: return mu;
        case Family::theta: return theta.at(index);
        case Family::gamma: return gamma;
        case Family::subject: return subject;
    }
    throw std::logic_error("unknown family");
}

TensorTerm& ModelState::term(TermRef ref) {
    return const_cast<TensorTerm&>(std::as_const(*this).term(ref));
}

const TensorTerm& ModelState::term(TermRef ref) const {
    switch (ref.family) {
        case Family::mu: return mu.terms.at(0);
        case Family::theta: return theta.at(ref.index).terms.at(0);
        case Family::gamma: return gamma.terms.at(ref.index);
        case Family::subject: return subject.terms.at(ref.index);
    }
    throw std::logic_error("unknown family");
}

// ---------------------------------------------------------------------------
// PosteriorStore

std::vector<double> PosteriorStore::mean(const std::vector<double>& field) const {
    const std::size_t p = voxels();
    std::vector<double> out(p, 0.0);
    if (draws == 0) return out;
    for (std::size_t t = 0; t < draws; ++t)
        for (std::size_t v = 0; v < p; ++v) out[v] += field[t * p + v];
    for (auto& x : out) x /= static_cast<double>(draws);
    return out;
}

std::vector<double> PosteriorStore::mean_sd(std::size_t scanner) const {
    const std::size_t p = voxels();
    std::vector<double> out(p, 0.0);
    if (draws == 0) return out;
    const auto& s2 = sigma2.at(scanner);
    for (std::size_t t = 0; t < draws; ++t)
        for (std::size_t v = 0; v < p; ++v) out[v] += std::sqrt(s2[t * p + v]);
    for (auto& x : out) x /= static_cast<double>(draws);
    return out;
}

double PosteriorStore::acceptance_rate(std::size_t chain) const {
    const auto n = alpha_proposed.at(chain);
    return n ? static_cast<double>(alpha_accepted.at(chain)) / static_cast<double>(n) : 0.0;
}

void PosteriorStore::write(BinaryWriter& w) const {
    w.magic("TCST");
    w.u32(kStoreVersion);
    write_mask(w, *mask);
    w.u64(n_scanners);
    write_strings(w, scanner_names);
    w.u64(images_per_scanner.size());
    for (auto n : images_per_scanner) w.u64(n);
    write_strings(w, covariate_names);
    write_strings(w, subject_names);
    w.u8(longitudinal);
    w.u8(time_interactions);
    w.u64(draws);
    w.f64s(mu);
    write_fields(w, theta);
    write_fields(w, gamma);
    write_fields(w, sigma2);
    write_fields(w, subject_mean);
    w.u8s(fitted);
    write_strings(w, alpha_labels);
    w.u64s(alpha_accepted);
    w.u64s(alpha_proposed);
    w.f64s(trace);
    w.u64(seed);
    w.u64(config_hash);
    w.u64(clamp_warnings);
    w.u8(complete);
}

PosteriorStore PosteriorStore::read(BinaryReader& r) {
    r.expect_magic("TCST");
    if (r.u32() != kStoreVersion) throw DataError("unsupported posterior store version");
    PosteriorStore s;
    s.mask = read_mask(r);
    s.n_scanners = r.u64();
    s.scanner_names = read_strings(r);
    const auto n = r.u64();
    if (n > r.remaining() / 8) throw DataError("truncated binary payload");
    s.images_per_scanner.resize(n);
    for (auto& x : s.images_per_scanner) x = r.u64();
    s.covariate_names = read_strings(r);
    s.subject_names = read_strings(r);
    s.longitudinal = r.u8() != 0;
    s.time_interactions = r.u8() != 0;
    s.draws = r.u64();
    s.mu = r.f64s();
    s.theta = read_fields(r);
    s.gamma = read_fields(r);
    s.sigma2 = read_fields(r);
    s.subject_mean = read_fields(r);
    s.fitted = r.u8s();
    s.alpha_labels = read_strings(r);
    s.alpha_accepted = r.u64s();
    s.alpha_proposed = r.u64s();
    s.trace = r.f64s();
    s.seed = r.u64();
    s.config_hash = r.u64();
    s.clamp_warnings = r.u64();
    s.complete = r.u8() != 0;

    const std::size_t p = s.voxels();
    auto check = [&](const std::vector<double>& f) {
        if (f.size() != s.draws * p) throw DataError("posterior store field size mismatch");
    };
    check(s.mu);
    for (const auto& f : s.theta) check(f);
    for (const auto& f : s.gamma) check(f);
    for (const auto& f : s.sigma2) check(f);
    if (s.gamma.size() != s.n_scanners || s.sigma2.size() != s.n_scanners ||
        s.scanner_names.size() != s.n_scanners || s.images_per_scanner.size() != s.n_scanners)
        throw DataError("posterior store scanner count mismatch");
    if (s.theta.size() != s.covariate_names.size()) throw DataError("posterior store covariate mismatch");
    if (s.fitted.size() != p) throw DataError("posterior store fitted-flag size mismatch");
    return s;
}

bool PosteriorStore::operator==(const PosteriorStore& o) const {
    return ((mask && o.mask) ? *mask == *o.mask : mask == o.mask) && n_scanners == o.n_scanners &&
           scanner_names == o.scanner_names && images_per_scanner == o.images_per_scanner &&
           covariate_names == o.covariate_names && subject_names == o.subject_names &&
           longitudinal == o.longitudinal && time_interactions == o.time_interactions &&
           draws == o.draws && same_bits(mu, o.mu) && same_bits(theta, o.theta) &&
           same_bits(gamma, o.gamma) && same_bits(sigma2, o.sigma2) &&
           same_bits(subject_mean, o.subject_mean) && fitted == o.fitted &&
           alpha_labels == o.alpha_labels && alpha_accepted == o.alpha_accepted &&
           alpha_proposed == o.alpha_proposed && same_bits(trace, o.trace) && seed == o.seed &&
           config_hash == o.config_hash && clamp_warnings == o.clamp_warnings && complete == o.complete;
}

// ---------------------------------------------------------------------------
// BtrrSampler

BtrrSampler::BtrrSampler(const StudyDataset& data, SamplerConfig config)
    : data_(data), config_(std::move(config)), rng_(config_.seed, config_.stream_id) {
    config_.validate();
    n_img_ = data_.n_images();
    n_vox_ = data_.mask().count();
    if (n_vox_ == 0) throw DataError("mask has no included voxels");

    const Dims& dims = data_.dims();
    mode_sizes_ = parafac_modes(dims);
    order_ = mode_sizes_.size();
    mode_index_.assign(order_, std::vector<std::uint32_t>(n_vox_));
    const auto& vox = data_.mask().voxels();
    for (std::size_t v = 0; v < n_vox_; ++v) {
        const auto c = dims.coords(vox[v]);
        for (std::size_t d = 0; d < order_; ++d) mode_index_[d][v] = static_cast<std::uint32_t>(c[d]);
    }

    y_.resize(n_img_ * n_vox_);
    for (std::size_t i = 0; i < n_img_; ++i) {
        const auto vals = data_.image(i).masked_values();
        for (std::size_t v = 0; v < n_vox_; ++v) {
            if (!std::isfinite(vals[v])) throw DataError("non-finite value inside the mask");
            y_[i * n_vox_ + v] = vals[v];
        }
    }

    const std::size_t q = data_.n_covariates();
    const std::size_t k = data_.n_scanners();
    const auto& x = data_.covariates();

    scanner_images_.assign(k, {});
    for (std::size_t i = 0; i < n_img_; ++i) scanner_images_[data_.scanner_of(i)].push_back(i);

    Design all;
    for (std::size_t i = 0; i < n_img_; ++i) {
        all.images.push_back(i);
        all.weights.push_back(1.0);
    }
    terms_.push_back({Family::mu, 0});
    designs_.push_back(all);
    for (std::size_t s = 0; s < q; ++s) {
        Design d;
        for (std::size_t i = 0; i < n_img_; ++i) {
            const double xi = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
            if (xi != 0.0) {
                d.images.push_back(i);
                d.weights.push_back(xi);
            }
        }
        terms_.push_back({Family::theta, s});
        designs_.push_back(std::move(d));
    }
    // A single scanner is absorbed into the intercept.
    if (k >= 2) {
        for (std::size_t j = 0; j < k; ++j) {
            Design d;
            d.images = scanner_images_[j];
            d.weights.assign(d.images.size(), 1.0);
            terms_.push_back({Family::gamma, j});
            designs_.push_back(std::move(d));
        }
    }
    if (config_.longitudinal) {
        std::vector<Design> subj(data_.n_subjects());
        for (std::size_t i = 0; i < n_img_; ++i) {
            subj[data_.subject_of(i)].images.push_back(i);
            subj[data_.subject_of(i)].weights.push_back(1.0);
        }
        for (std::size_t s = 0; s < subj.size(); ++s) {
            terms_.push_back({Family::subject, s});
            designs_.push_back(std::move(subj[s]));
        }
    }
    const std::size_t slots = terms_.size() * config_.rank * order_;
    alpha_accepted_.assign(slots, 0);
    alpha_proposed_.assign(slots, 0);
    residual_.resize(n_img_ * n_vox_);
    precision_.resize(k * n_vox_);
    initialize();
}

std::size_t BtrrSampler::term_slot(TermRef ref) const {
    const std::size_t q = data_.n_covariates();
    const std::size_t kg = data_.n_scanners() >= 2 ? data_.n_scanners() : 0;
    std::size_t slot = 0;
    switch (ref.family) {
        case Family::mu: slot = 0; break;
        case Family::theta:
            if (ref.index >= q) throw DataError("theta index out of range");
            slot = 1 + ref.index;
            break;
        case Family::gamma:
            if (ref.index >= kg) throw DataError("gamma index out of range");
            slot = 1 + q + ref.index;
            break;
        case Family::subject:
            if (!config_.longitudinal || ref.index >= data_.n_subjects())
                throw DataError("subject index out of range");
            slot = 1 + q + kg + ref.index;
            break;
    }
    return slot;
}

std::size_t BtrrSampler::alpha_slot(TermRef ref, std::size_t d, std::size_t r) const {
    return (term_slot(ref) * config_.rank + r) * order_ + d;
}

std::vector<std::string> BtrrSampler::alpha_labels() const {
    std::vector<std::string> out;
    for (const auto& ref : terms_) {
        std::string base = family_name(ref.family);
        switch (ref.family) {
            case Family::mu: break;
            case Family::theta: base += ":" + data_.covariate_names()[ref.index]; break;
            case Family::gamma: base += ":" + data_.scanner_names()[ref.index]; break;
            case Family::subject: base += ":" + data_.subject_names()[ref.index]; break;
        }
        for (std::size_t r = 0; r < config_.rank; ++r)
            for (std::size_t d = 0; d < order_; ++d)
                out.push_back(base + "/r" + std::to_string(r + 1) + "/d" + std::to_string(d + 1));
    }
    return out;
}

void BtrrSampler::initialize() {
    const double tau0 = config_.a_tau / config_.b_tau;
    const double lambda0 = config_.a_lambda / config_.b_lambda;
    const double w0 = 2.0 / lambda0;

    state_ = ModelState{};
    state_.theta.resize(data_.n_covariates());
    auto make_term = [&]() {
        TensorTerm t;
        t.coef = ParafacCoefficient(mode_sizes_, config_.rank);
        t.hyper.assign(config_.rank * order_, MarginHyper{w0, lambda0, 1.0});
        for (std::size_t r = 0; r < config_.rank; ++r)
            for (std::size_t d = 0; d < order_; ++d)
                for (auto& m : t.coef.margin(r, d)) m = draw_normal(0.0, 0.01, rng_);
        return t;
    };
    for (const auto& ref : terms_) {
        auto& g = state_.group(ref.family, ref.family == Family::theta ? ref.index : 0);
        g.tau = tau0;
        g.terms.push_back(make_term());
    }

    // OLS pre-fit on intercept, covariates and scanner indicators.
    const std::size_t k = data_.n_scanners();
    const std::size_t q = data_.n_covariates();
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n_img_), static_cast<Eigen::Index>(1 + q + (k - 1)));
    design.setZero();
    for (std::size_t i = 0; i < n_img_; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        design(row, 0) = 1.0;
        for (std::size_t s = 0; s < q; ++s)
            design(row, static_cast<Eigen::Index>(1 + s)) = data_.covariates()(row, static_cast<Eigen::Index>(s));
        const std::size_t j = data_.scanner_of(i);
        if (j > 0) design(row, static_cast<Eigen::Index>(q + j)) = 1.0;
    }
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> y(
        y_.data(), static_cast<Eigen::Index>(n_img_), static_cast<Eigen::Index>(n_vox_));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    const Eigen::MatrixXd coef = qr.solve(Eigen::MatrixXd(y));
    const Eigen::MatrixXd resid = y - design * coef;
    const auto rank = static_cast<std::size_t>(qr.rank());

    if (config_.ols_warm_start) {
        // Cell means recoded to the weighted sum-to-zero scanner convention.
        Eigen::RowVectorXd shift = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(n_vox_));
        for (std::size_t j = 1; j < k; ++j)
            shift += static_cast<double>(scanner_images_[j].size()) / static_cast<double>(n_img_) *
                     coef.row(static_cast<Eigen::Index>(q + j));
        auto row_vector = [](const Eigen::RowVectorXd& r) { return std::vector<double>(r.data(), r.data() + r.size()); };
        for (const auto& ref : terms_) {
            Eigen::RowVectorXd target;
            switch (ref.family) {
                case Family::mu: target = coef.row(0) + shift; break;
                case Family::theta: target = coef.row(static_cast<Eigen::Index>(1 + ref.index)); break;
                case Family::gamma:
                    target = -shift;
                    if (ref.index > 0) target += coef.row(static_cast<Eigen::Index>(q + ref.index));
                    break;
                case Family::subject: {
                    target = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(n_vox_));
                    std::size_t m = 0;
                    for (std::size_t i = 0; i < n_img_; ++i)
                        if (data_.subject_of(i) == ref.index) {
                            target += resid.row(static_cast<Eigen::Index>(i));
                            ++m;
                        }
                    if (m) target /= static_cast<double>(m);
                    break;
                }
            }
            add_low_rank(state_.term(ref).coef, row_vector(target));
        }
    }

    const double total_mean = y.mean();
    const double total_var = (y.array() - total_mean).square().mean();
    const double fallback = total_var > 0.0 ? total_var : 1.0;
    const double dof_scale =
        n_img_ > rank ? static_cast<double>(n_img_) / static_cast<double>(n_img_ - rank) : 0.0;
    const double pooled = resid.array().square().mean() * dof_scale;
    if (!config_.b_eps) config_.b_eps = 0.5 * (pooled > 0.0 && std::isfinite(pooled) ? pooled : fallback);

    const std::size_t h = config_.n_mixture;
    auto& noise = state_.noise;
    noise.components = h;
    noise.s2.assign(k, std::vector<double>(h));
    noise.weights.assign(k, std::vector<double>(h, 1.0 / static_cast<double>(h)));
    noise.labels.assign(k, std::vector<std::uint32_t>(n_vox_, 0));
    for (std::size_t j = 0; j < k; ++j) {
        double ss = 0.0;
        for (auto i : scanner_images_[j])
            ss += resid.row(static_cast<Eigen::Index>(i)).squaredNorm();
        double var = ss / static_cast<double>(scanner_images_[j].size() * n_vox_) * dof_scale;
        if (!(var > 0.0) || !std::isfinite(var)) var = fallback;
        for (std::size_t c = 0; c < h; ++c) {
            const double frac = h == 1 ? 0.5 : static_cast<double>(c) / static_cast<double>(h - 1);
            noise.s2[j][c] = var * 0.25 * std::pow(16.0, frac);
        }
        if (h > 1)
            for (auto& z : noise.labels[j])
                z = static_cast<std::uint32_t>(std::min<std::size_t>(
                    h - 1, static_cast<std::size_t>(rng_.uniform() * static_cast<double>(h))));
    }
    refresh_precisions();
    recompute_residuals();
}

void BtrrSampler::add_low_rank(ParafacCoefficient& coef, std::vector<double> target) const {
    constexpr int kSweeps = 30;
    for (std::size_t r = 0; r < coef.rank(); ++r) {
        std::vector<std::vector<double>> m(order_);
        for (std::size_t d = 0; d < order_; ++d) m[d].assign(mode_sizes_[d], 1.0);
        for (int it = 0; it < kSweeps; ++it)
            for (std::size_t d = 0; d < order_; ++d) {
                std::vector<double> num(mode_sizes_[d], 0.0), den(mode_sizes_[d], 0.0);
                for (std::size_t v = 0; v < n_vox_; ++v) {
                    double p = 1.0;
                    for (std::size_t e = 0; e < order_; ++e)
                        if (e != d) p *= m[e][mode_index_[e][v]];
                    num[mode_index_[d][v]] += p * target[v];
                    den[mode_index_[d][v]] += p * p;
                }
                for (std::size_t i = 0; i < num.size(); ++i) m[d][i] = den[i] > 0.0 ? num[i] / den[i] : 0.0;
            }
        // Equal norms across modes, so no margin starts far out in its prior.
        double log_geo = 0.0;
        std::vector<double> norm(order_);
        for (std::size_t d = 0; d < order_; ++d) {
            double s = 0.0;
            for (double x : m[d]) s += x * x;
            norm[d] = std::sqrt(s);
            log_geo += std::log(norm[d]) / static_cast<double>(order_);
        }
        if (!std::isfinite(log_geo)) return;  // nothing left to explain
        for (std::size_t d = 0; d < order_; ++d) {
            const double scale = std::exp(log_geo) / norm[d];
            auto margin = coef.margin(r, d);
            for (std::size_t i = 0; i < m[d].size(); ++i) {
                m[d][i] *= scale;
                margin[i] += m[d][i];
            }
        }
        for (std::size_t v = 0; v < n_vox_; ++v) {
            double p = 1.0;
            for (std::size_t d = 0; d < order_; ++d) p *= m[d][mode_index_[d][v]];
            target[v] -= p;
        }
    }
}

void BtrrSampler::refresh_precisions() {
    const auto& noise = state_.noise;
    for (std::size_t j = 0; j < data_.n_scanners(); ++j)
        for (std::size_t v = 0; v < n_vox_; ++v)
            precision_[j * n_vox_ + v] = 1.0 / noise.s2[j][noise.labels[j][v]];
}

void BtrrSampler::channel_values(const ParafacCoefficient& coef, std::size_t r, std::vector<double>& out) const {
    out.assign(n_vox_, 1.0);
    for (std::size_t d = 0; d < order_; ++d) {
        const auto m = coef.margin(r, d);
        const auto& idx = mode_index_[d];
        for (std::size_t v = 0; v < n_vox_; ++v) out[v] *= m[idx[v]];
    }
}

std::vector<double> BtrrSampler::term_map(TermRef ref) const {
    const auto& coef = state_.term(ref).coef;
    std::vector<double> out(n_vox_, 0.0), ch;
    for (std::size_t r = 0; r < coef.rank(); ++r) {
        channel_values(coef, r, ch);
        for (std::size_t v = 0; v < n_vox_; ++v) out[v] += ch[v];
    }
    return out;
}

void BtrrSampler::recompute_residuals() {
    residual_ = y_;
    for (std::size_t slot = 0; slot < terms_.size(); ++slot) {
        const auto map = term_map(terms_[slot]);
        const auto& des = designs_[slot];
        for (std::size_t e = 0; e < des.images.size(); ++e) {
            double* row = residual_.data() + des.images[e] * n_vox_;
            const double w = des.weights[e];
            for (std::size_t v = 0; v < n_vox_; ++v) row[v] -= w * map[v];
        }
    }
}

double BtrrSampler::residual_drift() const {
    std::vector<double> fresh = y_;
    for (std::size_t slot = 0; slot < terms_.size(); ++slot) {
        const auto map = term_map(terms_[slot]);
        const auto& des = designs_[slot];
        for (std::size_t e = 0; e < des.images.size(); ++e) {
            double* row = fresh.data() + des.images[e] * n_vox_;
            for (std::size_t v = 0; v < n_vox_; ++v) row[v] -= des.weights[e] * map[v];
        }
    }
    double worst = 0.0;
    for (std::size_t n = 0; n < fresh.size(); ++n)
        worst = std::max(worst, std::abs(fresh[n] - residual_[n]) / std::max(1.0, std::abs(y_[n])));
    return worst;
}

double BtrrSampler::residual_sum_of_squares() const {
    double ss = 0.0;
    for (double e : residual_) ss += e * e;
    return ss;
}

void BtrrSampler::channel_aggregates(TermRef ref, std::size_t r, std::vector<double>& a,
                                     std::vector<double>& b, std::vector<double>& channel) const {
    channel_values(state_.term(ref).coef, r, channel);
    a.assign(n_vox_, 0.0);
    b.assign(n_vox_, 0.0);
    const auto& des = designs_[term_slot(ref)];
    for (std::size_t e = 0; e < des.images.size(); ++e) {
        const std::size_t i = des.images[e];
        const double w = des.weights[e];
        const double* res = residual_.data() + i * n_vox_;
        const double* prec = precision_.data() + data_.scanner_of(i) * n_vox_;
        for (std::size_t v = 0; v < n_vox_; ++v) {
            a[v] += w * prec[v] * (res[v] + w * channel[v]);
            b[v] += w * w * prec[v];
        }
    }
}

void BtrrSampler::data_terms(const ParafacCoefficient& coef, std::size_t r, std::size_t d,
                             const std::vector<double>& a, const std::vector<double>& b,
                             std::vector<double>& n_k, std::vector<double>& m_k) const {
    n_k.assign(mode_sizes_[d], 0.0);
    m_k.assign(mode_sizes_[d], 0.0);
    const auto& idx = mode_index_[d];
    for (std::size_t v = 0; v < n_vox_; ++v) {
        double other = 1.0;
        for (std::size_t e = 0; e < order_; ++e)
            if (e != d) other *= coef.margin(r, e)[mode_index_[e][v]];
        n_k[idx[v]] += a[v] * other;
        m_k[idx[v]] += b[v] * other * other;
    }
}

MarginConditional BtrrSampler::conditional_from(const TensorTerm& term, double tau, std::size_t d,
                                                std::size_t r, std::size_t k, double n_k,
                                                double m_k) const {
    const auto& h = term.at(r, d);
    const auto mu = term.coef.margin(r, d);
    const std::size_t p = mu.size();
    // Written in terms of the prior scale s so that s -> 0 stays finite.
    MarginConditional c;
    if (p == 1) {
        const double s = tau * h.w;
        const double denom = m_k * s + 1.0;
        c.mean = n_k * s / denom;
        c.var = s / denom;
        return c;
    }
    const double rho = std::exp(-h.alpha);
    const double s = tau * h.w * one_minus_rho_sq(h.alpha);
    const bool boundary = k == 0 || k + 1 == p;
    const double diag = boundary ? 1.0 : 1.0 + rho * rho;
    double nb = 0.0;
    if (k > 0) nb += mu[k - 1];
    if (k + 1 < p) nb += mu[k + 1];
    const double denom = m_k * s + diag;
    c.mean = (n_k * s + rho * nb) / denom;
    c.var = s / denom;
    return c;
}

MarginConditional BtrrSampler::margin_conditional(TermRef ref, std::size_t d, std::size_t r, std::size_t k) {
    if (d >= order_ || r >= config_.rank) throw DataError("margin index out of range");
    if (k >= mode_sizes_[d]) throw DataError("margin element index out of range");
    std::vector<double> a, b, ch, n_k, m_k;
    channel_aggregates(ref, r, a, b, ch);
    const auto& term = state_.term(ref);
    data_terms(term.coef, r, d, a, b, n_k, m_k);
    const double tau = state_.group(ref.family, ref.family == Family::theta ? ref.index : 0).tau;
    return conditional_from(term, tau, d, r, k, n_k[k], m_k[k]);
}

void BtrrSampler::update_margin_with(TermRef ref, std::size_t d, std::size_t r,
                                     const std::vector<double>& a, const std::vector<double>& b) {
    auto& term = state_.term(ref);
    const double tau = state_.group(ref.family, ref.family == Family::theta ? ref.index : 0).tau;
    std::vector<double> n_k, m_k;
    data_terms(term.coef, r, d, a, b, n_k, m_k);
    auto mu = term.coef.margin(r, d);
    for (std::size_t k = 0; k < mu.size(); ++k) {
        const auto c = conditional_from(term, tau, d, r, k, n_k[k], m_k[k]);
        const double draw = c.var < kVarGuard ? c.mean : c.mean + std::sqrt(c.var) * rng_.standard_normal();
        if (!std::isfinite(draw))
            throw DivergenceError(std::string("non-finite margin draw in ") + family_name(ref.family) + "[" +
                                      std::to_string(ref.index) + "] r=" + std::to_string(r + 1) +
                                      " d=" + std::to_string(d + 1) + " k=" + std::to_string(k + 1),
                                  static_cast<long>(iteration_ + 1));
        mu[k] = draw;
    }
}

void BtrrSampler::update_margin(TermRef ref, std::size_t d, std::size_t r) {
    if (d >= order_ || r >= config_.rank) throw DataError("margin index out of range");
    std::vector<double> a, b, before, after;
    channel_aggregates(ref, r, a, b, before);
    update_margin_with(ref, d, r, a, b);
    channel_values(state_.term(ref).coef, r, after);
    const auto& des = designs_[term_slot(ref)];
    for (std::size_t e = 0; e < des.images.size(); ++e) {
        double* row = residual_.data() + des.images[e] * n_vox_;
        for (std::size_t v = 0; v < n_vox_; ++v) row[v] -= des.weights[e] * (after[v] - before[v]);
    }
}

void BtrrSampler::update_channel(TermRef ref, std::size_t r) {
    std::vector<double> a, b, before, after;
    channel_aggregates(ref, r, a, b, before);
    for (std::size_t d = 0; d < order_; ++d) {
        update_margin_with(ref, d, r, a, b);
        if (!config_.freeze_hyper) {
            update_w(ref, d, r);
            update_lambda(ref, d, r);
            update_alpha(ref, d, r);
        }
    }
    channel_values(state_.term(ref).coef, r, after);
    const auto& des = designs_[term_slot(ref)];
    for (std::size_t e = 0; e < des.images.size(); ++e) {
        double* row = residual_.data() + des.images[e] * n_vox_;
        for (std::size_t v = 0; v < n_vox_; ++v) row[v] -= des.weights[e] * (after[v] - before[v]);
    }
}

double BtrrSampler::w_statistic(TermRef ref, std::size_t d, std::size_t r) const {
    const auto& term = state_.term(ref);
    const double tau = state_.group(ref.family, ref.family == Family::theta ? ref.index : 0).tau;
    return ar1_quadform(term.coef.margin(r, d), term.at(r, d).alpha, 1.0, tau);
}

double BtrrSampler::update_w(TermRef ref, std::size_t d, std::size_t r) {
    auto& h = state_.term(ref).at(r, d);
    const double p = static_cast<double>(mode_sizes_[d]);
    const double eta = 1.0 - p / 2.0;
    double c = w_statistic(ref, d, r);
    if (!(c > 0.0) && eta <= 0.0) {
        c = kChiFloor;
        ++clamp_warnings_;
    }
    const double w = draw_gig({eta, std::max(c, 0.0), h.lambda}, rng_);
    if (!(w > 0.0) || !std::isfinite(w))
        throw DivergenceError("invalid w draw", static_cast<long>(iteration_ + 1));
    h.w = w;
    return w;
}

double BtrrSampler::update_lambda(TermRef ref, std::size_t d, std::size_t r) {
    auto& h = state_.term(ref).at(r, d);
    const double p = static_cast<double>(mode_sizes_[d]);
    if (p < 1.0) throw DataError("margin length must be >= 1");
    h.lambda = draw_gamma(config_.a_lambda + p, config_.b_lambda + p * h.w / 2.0, rng_);
    return h.lambda;
}

double BtrrSampler::tau_statistic(Family family, std::size_t group_index) const {
    const auto& g = state_.group(family, group_index);
    double chi = 0.0;
    for (const auto& term : g.terms)
        for (std::size_t r = 0; r < term.coef.rank(); ++r)
            for (std::size_t d = 0; d < term.coef.order(); ++d) {
                const auto& h = term.at(r, d);
                chi += ar1_quadform(term.coef.margin(r, d), h.alpha, h.w, 1.0);
            }
    return chi;
}

double BtrrSampler::update_tau(Family family, std::size_t group_index) {
    auto& g = state_.group(family, group_index);
    if (g.terms.empty()) return g.tau;
    const double sum_p = std::accumulate(mode_sizes_.begin(), mode_sizes_.end(), 0.0);
    const double eta = config_.a_tau -
                       static_cast<double>(g.terms.size()) * static_cast<double>(config_.rank) * sum_p / 2.0;
    const double chi = tau_statistic(family, group_index);
    double tau;
    if (!(chi > 0.0))
        tau = draw_gamma(config_.a_tau, config_.b_tau, rng_);
    else
        tau = draw_gig({eta, chi, 2.0 * config_.b_tau}, rng_);
    if (!(tau > 0.0) || !std::isfinite(tau))
        throw DivergenceError(std::string("invalid tau draw for ") + family_name(family),
                              static_cast<long>(iteration_ + 1));
    g.tau = tau;
    return tau;
}

double BtrrSampler::alpha_log_target(TermRef ref, std::size_t d, std::size_t r, double alpha) const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) return -std::numeric_limits<double>::infinity();
    const auto& term = state_.term(ref);
    const auto& h = term.at(r, d);
    const double tau = state_.group(ref.family, ref.family == Family::theta ? ref.index : 0).tau;
    const auto mu = term.coef.margin(r, d);
    const double p = static_cast<double>(mu.size());
    double lt = (config_.a_alpha - 1.0) * std::log(alpha) - config_.b_alpha * alpha -
                0.5 * ar1_quadform(mu, alpha, h.w, tau);
    if (mu.size() > 1) lt -= 0.5 * (p - 1.0) * std::log(one_minus_rho_sq(alpha));
    return lt;
}

bool BtrrSampler::update_alpha(TermRef ref, std::size_t d, std::size_t r) {
    const std::size_t slot = alpha_slot(ref, d, r);
    auto& h = state_.term(ref).at(r, d);
    const double current = h.alpha;
    const double proposal = current * std::exp(std::sqrt(config_.mh_proposal_var) * rng_.standard_normal());
    const double u = rng_.uniform();
    ++alpha_proposed_[slot];
    if (!(proposal > 0.0) || !std::isfinite(proposal)) return false;
    const double log_ratio = alpha_log_target(ref, d, r, proposal) - alpha_log_target(ref, d, r, current) +
                             std::log(proposal) - std::log(current);
    if (std::log(u) < log_ratio) {
        h.alpha = proposal;
        ++alpha_accepted_[slot];
        return true;
    }
    return false;
}

void BtrrSampler::update_noise_mixture() {
    auto& noise = state_.noise;
    const std::size_t h = noise.components;
    const double b_eps = *config_.b_eps;
    std::vector<double> ss(n_vox_), logw(h), conc(h);
    std::vector<double> cnt_sum(h), ss_sum(h);
    std::vector<std::size_t> members(h);
    for (std::size_t j = 0; j < data_.n_scanners(); ++j) {
        std::fill(ss.begin(), ss.end(), 0.0);
        for (auto i : scanner_images_[j]) {
            const double* res = residual_.data() + i * n_vox_;
            for (std::size_t v = 0; v < n_vox_; ++v) ss[v] += res[v] * res[v];
        }
        const double cnt = static_cast<double>(scanner_images_[j].size());
        auto& s2 = noise.s2[j];
        auto& pi = noise.weights[j];
        auto& z = noise.labels[j];

        if (h > 1) {
            std::vector<double> log_pi(h), log_s2(h);
            for (std::size_t c = 0; c < h; ++c) {
                log_pi[c] = std::log(pi[c]);
                log_s2[c] = std::log(s2[c]);
            }
            for (std::size_t v = 0; v < n_vox_; ++v) {
                for (std::size_t c = 0; c < h; ++c)
                    logw[c] = log_pi[c] - 0.5 * cnt * log_s2[c] - ss[v] / (2.0 * s2[c]);
                z[v] = static_cast<std::uint32_t>(draw_categorical_log(logw, rng_));
            }
        }
        std::fill(members.begin(), members.end(), 0);
        std::fill(cnt_sum.begin(), cnt_sum.end(), 0.0);
        std::fill(ss_sum.begin(), ss_sum.end(), 0.0);
        for (std::size_t v = 0; v < n_vox_; ++v) {
            ++members[z[v]];
            cnt_sum[z[v]] += cnt;
            ss_sum[z[v]] += ss[v];
        }
        if (h > 1) {
            for (std::size_t c = 0; c < h; ++c)
                conc[c] = static_cast<double>(members[c]) + config_.a_pi / static_cast<double>(h);
            pi = draw_dirichlet(conc, rng_);
        }
        for (std::size_t c = 0; c < h; ++c) {
            s2[c] = members[c] == 0
                        ? draw_inverse_gamma(config_.a_eps, b_eps, rng_)
                        : draw_inverse_gamma(config_.a_eps + 0.5 * cnt_sum[c], b_eps + 0.5 * ss_sum[c], rng_);
            if (!(s2[c] > 0.0) || !std::isfinite(s2[c]))
                throw DivergenceError("invalid noise variance draw for scanner " + data_.scanner_names()[j],
                                      static_cast<long>(iteration_ + 1));
        }
    }
    refresh_precisions();
}

void BtrrSampler::sweep() {
    recompute_residuals();
    for (const auto& ref : terms_)
        for (std::size_t r = 0; r < config_.rank; ++r) update_channel(ref, r);
    if (!config_.freeze_hyper) {
        update_tau(Family::mu);
        for (std::size_t s = 0; s < state_.theta.size(); ++s) update_tau(Family::theta, s);
        update_tau(Family::gamma);
        update_tau(Family::subject);
    }
    if (!config_.freeze_noise) update_noise_mixture();
    ++iteration_;
    if (!std::isfinite(residual_sum_of_squares()))
        throw DivergenceError("non-finite residual sum of squares", static_cast<long>(iteration_));
}

void BtrrSampler::write_state(BinaryWriter& w) const {
    w.u64(iteration_);
    auto write_group = [&](const TermGroup& g) {
        w.f64(g.tau);
        w.u64(g.terms.size());
        for (const auto& t : g.terms) {
            for (std::size_t r = 0; r < t.coef.rank(); ++r)
                for (std::size_t d = 0; d < t.coef.order(); ++d) {
                    const auto m = t.coef.margin(r, d);
                    w.f64s(std::vector<double>(m.begin(), m.end()));
                }
            for (const auto& h : t.hyper) {
                w.f64(h.w);
                w.f64(h.lambda);
                w.f64(h.alpha);
            }
        }
    };
    write_group(state_.mu);
    w.u64(state_.theta.size());
    for (const auto& g : state_.theta) write_group(g);
    write_group(state_.gamma);
    write_group(state_.subject);

    const auto& noise = state_.noise;
    w.u64(noise.components);
    write_fields(w, noise.s2);
    write_fields(w, noise.weights);
    w.u64(noise.labels.size());
    for (const auto& z : noise.labels) {
        w.u64(z.size());
        for (auto l : z) w.u32(l);
    }
    const auto st = rng_.state();
    for (auto x : st.s) w.u64(x);
    w.u8(st.has_spare);
    w.f64(st.spare);
    w.u64s(alpha_accepted_);
    w.u64s(alpha_proposed_);
    w.u64(clamp_warnings_);
}

void BtrrSampler::read_state(BinaryReader& in) {
    auto mismatch = [] { return DimsError("checkpoint state does not match the dataset"); };
    ModelState st = state_;
    const std::size_t iteration = in.u64();
    auto read_group = [&](TermGroup& g) {
        g.tau = in.f64();
        if (in.u64() != g.terms.size()) throw mismatch();
        for (auto& t : g.terms) {
            for (std::size_t r = 0; r < t.coef.rank(); ++r)
                for (std::size_t d = 0; d < t.coef.order(); ++d) {
                    auto vals = in.f64s();
                    if (vals.size() != t.coef.mode_sizes()[d]) throw mismatch();
                    t.coef.set_margin(r, d, std::move(vals));
                }
            for (auto& h : t.hyper) {
                h.w = in.f64();
                h.lambda = in.f64();
                h.alpha = in.f64();
            }
        }
    };
    read_group(st.mu);
    if (in.u64() != st.theta.size()) throw mismatch();
    for (auto& g : st.theta) read_group(g);
    read_group(st.gamma);
    read_group(st.subject);

    auto& noise = st.noise;
    if (in.u64() != noise.components) throw mismatch();
    noise.s2 = read_fields(in);
    noise.weights = read_fields(in);
    if (noise.s2.size() != data_.n_scanners() || noise.weights.size() != data_.n_scanners()) throw mismatch();
    if (in.u64() != noise.labels.size()) throw mismatch();
    for (auto& z : noise.labels) {
        if (in.u64() != z.size()) throw mismatch();
        for (auto& l : z) {
            l = in.u32();
            if (l >= noise.components) throw mismatch();
        }
    }
    for (const auto& v : noise.s2)
        if (v.size() != noise.components) throw mismatch();
    RngStream::State rs;
    for (auto& x : rs.s) x = in.u64();
    rs.has_spare = in.u8() != 0;
    rs.spare = in.f64();
    auto acc = in.u64s();
    auto prop = in.u64s();
    if (acc.size() != alpha_accepted_.size() || prop.size() != alpha_proposed_.size()) throw mismatch();
    const auto warnings = in.u64();

    state_ = std::move(st);
    rng_.restore(rs);
    alpha_accepted_ = std::move(acc);
    alpha_proposed_ = std::move(prop);
    clamp_warnings_ = warnings;
    iteration_ = iteration;
    refresh_precisions();
    recompute_residuals();
}

// ---------------------------------------------------------------------------
// Drivers

std::uint64_t config_hash(const SamplerConfig& config) {
    BinaryWriter w;
    write_config(w, config, false);
    return fnv1a64(w.buffer());
}

std::uint64_t dataset_fingerprint(const StudyDataset& data) {
    BinaryWriter w;
    write_mask(w, data.mask());
    for (const auto& img : data.images())
        for (double v : img.values()) w.f64(v);
    for (std::size_t i = 0; i < data.n_images(); ++i) {
        w.str(data.scanner_names()[data.scanner_of(i)]);
        w.str(data.record(i).subject);
        w.u64(static_cast<std::uint64_t>(data.record(i).visit));
        w.f64(data.record(i).visit_months);
    }
    write_strings(w, data.covariate_names());
    const auto& raw = data.raw_covariates();
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
        for (Eigen::Index c = 0; c < raw.cols(); ++c) w.f64(raw(i, c));
    return fnv1a64(w.buffer());
}

std::uint64_t slice_stream_id(const SamplerConfig& config, std::size_t index) {
    return config.stream_id * 1024 + 1 + index;
}

class FitDriver {
public:
    FitDriver(const StudyDataset& dataset, const SamplerConfig& config)
        : data_(config.longitudinal ? dataset.with_time_covariates(config.time_interactions) : dataset),
          fingerprint_(dataset_fingerprint(dataset)),
          sampler_(data_, config) {
        const auto& cfg = sampler_.config();
        store_.mask = data_.mask_ptr();
        store_.n_scanners = data_.n_scanners();
        store_.scanner_names = data_.scanner_names();
        store_.images_per_scanner = data_.images_per_scanner();
        store_.covariate_names = data_.covariate_names();
        store_.longitudinal = cfg.longitudinal;
        store_.time_interactions = cfg.time_interactions;
        if (cfg.longitudinal) {
            store_.subject_names = data_.subject_names();
            store_.subject_mean.assign(data_.n_subjects(), std::vector<double>(data_.mask().count(), 0.0));
        }
        store_.theta.assign(data_.n_covariates(), {});
        store_.gamma.assign(data_.n_scanners(), {});
        store_.sigma2.assign(data_.n_scanners(), {});
        store_.fitted.assign(data_.mask().count(), 1);
        store_.alpha_labels = sampler_.alpha_labels();
        store_.seed = cfg.seed;
        store_.config_hash = config_hash(cfg);
    }

    BtrrSampler& sampler() { return sampler_; }
    PosteriorStore& store() { return store_; }
    std::uint64_t fingerprint() const { return fingerprint_; }

    PosteriorStore run() {
        const auto& cfg = sampler_.config();
        store_.draws = store_.mu.size() / store_.voxels();
        while (sampler_.iteration_ < cfg.iters) {
            std::vector<std::uint8_t> before;
            if (!cfg.checkpoint_path.empty()) {
                BinaryWriter w;
                sampler_.write_state(w);
                before = w.release();
            }
            try {
                sampler_.sweep();
            } catch (const DivergenceError&) {
                if (!cfg.checkpoint_path.empty()) write_checkpoint(before);
                throw;
            }
            const std::size_t it = sampler_.iteration_;
            store_.trace.push_back(std::log(sampler_.residual_sum_of_squares()));
            if (it > cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0) append_draw();
            if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) write_checkpoint();
            if (cfg.stop_after > 0 && it == cfg.stop_after && it < cfg.iters) {
                write_checkpoint();
                store_.complete = false;
                return finish();
            }
        }
        store_.complete = true;
        return finish();
    }

    void write_checkpoint() {
        BinaryWriter w;
        sampler_.write_state(w);
        write_checkpoint(w.release());
    }

    void write_checkpoint(const std::vector<std::uint8_t>& state_bytes) {
        BinaryWriter w;
        w.magic("TCKP");
        w.u32(kCheckpointVersion);
        write_config(w, sampler_.config(), true);
        w.u64(fingerprint_);
        w.u8s(state_bytes);
        PosteriorStore partial = store_;
        partial.complete = false;
        partial.alpha_accepted = sampler_.alpha_accepted();
        partial.alpha_proposed = sampler_.alpha_proposed();
        partial.clamp_warnings = sampler_.clamp_warnings();
        partial.write(w);
        write_file_atomic(sampler_.config().checkpoint_path, w.buffer());
    }

    void load(BinaryReader& r) {
        auto state_bytes = r.u8s();
        BinaryReader sr(state_bytes);
        sampler_.read_state(sr);
        auto partial = PosteriorStore::read(r);
        if (!(*partial.mask == *store_.mask) || partial.theta.size() != store_.theta.size() ||
            partial.gamma.size() != store_.gamma.size() ||
            partial.subject_mean.size() != store_.subject_mean.size())
            throw DimsError("checkpoint store does not match the dataset");
        partial.mask = store_.mask;
        partial.config_hash = store_.config_hash;
        store_ = std::move(partial);
    }

private:
    void append_draw() {
        const std::size_t p = store_.voxels();
        auto mu = sampler_.term_map({Family::mu, 0});
        for (std::size_t s = 0; s < store_.theta.size(); ++s) {
            const auto map = sampler_.term_map({Family::theta, s});
            store_.theta[s].insert(store_.theta[s].end(), map.begin(), map.end());
        }
        const std::size_t k = store_.n_scanners;
        if (k >= 2) {
            std::vector<std::vector<double>> g(k);
            std::vector<double> bar(p, 0.0);
            double n_total = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                g[j] = sampler_.term_map({Family::gamma, j});
                const double nj = static_cast<double>(store_.images_per_scanner[j]);
                n_total += nj;
                for (std::size_t v = 0; v < p; ++v) bar[v] += nj * g[j][v];
            }
            for (std::size_t v = 0; v < p; ++v) {
                bar[v] /= n_total;
                mu[v] += bar[v];
            }
            for (std::size_t j = 0; j < k; ++j) {
                for (std::size_t v = 0; v < p; ++v) g[j][v] -= bar[v];
                store_.gamma[j].insert(store_.gamma[j].end(), g[j].begin(), g[j].end());
            }
        } else {
            store_.gamma[0].insert(store_.gamma[0].end(), p, 0.0);
        }
        if (store_.longitudinal) {
            const std::size_t ns = store_.subject_mean.size();
            std::vector<std::vector<double>> b(ns);
            std::vector<double> bar(p, 0.0);
            for (std::size_t i = 0; i < ns; ++i) {
                b[i] = sampler_.term_map({Family::subject, i});
                for (std::size_t v = 0; v < p; ++v) bar[v] += b[i][v];
            }
            const double t = static_cast<double>(store_.draws + 1);
            for (std::size_t v = 0; v < p; ++v) {
                bar[v] /= static_cast<double>(ns);
                mu[v] += bar[v];
            }
            for (std::size_t i = 0; i < ns; ++i)
                for (std::size_t v = 0; v < p; ++v)
                    store_.subject_mean[i][v] += ((b[i][v] - bar[v]) - store_.subject_mean[i][v]) / t;
        }
        store_.mu.insert(store_.mu.end(), mu.begin(), mu.end());
        const auto& noise = sampler_.state().noise;
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t v = 0; v < p; ++v) store_.sigma2[j].push_back(noise.variance(j, v));
        ++store_.draws;
    }

    PosteriorStore finish() {
        store_.alpha_accepted = sampler_.alpha_accepted();
        store_.alpha_proposed = sampler_.alpha_proposed();
        store_.clamp_warnings = sampler_.clamp_warnings();
        return store_;
    }

    StudyDataset data_;
    std::uint64_t fingerprint_;
    BtrrSampler sampler_;
    PosteriorStore store_;
};

PosteriorStore fit(const StudyDataset& dataset, const SamplerConfig& config) {
    config.validate();
    FitDriver driver(dataset, config);
    return driver.run();
}

namespace {

struct CheckpointHeader {
    SamplerConfig config;
    std::uint64_t fingerprint = 0;
};

CheckpointHeader read_header(BinaryReader& r) {
    r.expect_magic("TCKP");
    if (r.u32() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    CheckpointHeader h;
    h.config = read_config(r);
    h.fingerprint = r.u64();
    return h;
}

}  // namespace

SamplerConfig checkpoint_config(const std::string& path, std::size_t* iteration) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes);
    auto h = read_header(r);
    if (iteration) {
        const auto state = r.u8s();
        BinaryReader sr(state);
        *iteration = sr.u64();
    }
    return h.config;
}

PosteriorStore resume(const std::string& path, const StudyDataset& dataset, std::size_t iters_override) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes);
    auto h = read_header(r);
    if (h.fingerprint != dataset_fingerprint(dataset))
        throw HashMismatchError("dataset does not match the checkpointed run");
    SamplerConfig cfg = h.config;
    cfg.checkpoint_path = path;
    cfg.stop_after = 0;
    if (iters_override > 0) cfg.iters = iters_override;
    cfg.validate();
    FitDriver driver(dataset, cfg);
    driver.load(r);
    if (driver.sampler().iteration() > cfg.iters)
        throw ConfigError("checkpoint is already past the requested iteration count");
    return driver.run();
}

PosteriorStore fit_slicewise(const StudyDataset& dataset, const SamplerConfig& config) {
    config.validate();
    if (config.checkpoint_every > 0 || config.stop_after > 0)
        throw ConfigError("checkpointing is supported for volume fits only");
    const std::size_t axis = config.slice_axis - 1;
    const Dims& dims = dataset.dims();
    const Mask& mask = dataset.mask();
    const std::size_t p = mask.count();

    PosteriorStore out;
    bool have_meta = false;
    std::vector<double> rss;
    for (std::size_t idx = 0; idx < dims[axis]; ++idx) {
        auto sm = slice_mask(mask, axis, idx);
        const double frac = static_cast<double>(sm->count()) / static_cast<double>(sm->dims().size());
        if (sm->count() == 0 || frac < config.min_slice_fraction) continue;

        SamplerConfig scfg = config;
        scfg.stream_id = slice_stream_id(config, idx);
        scfg.checkpoint_path.clear();
        const auto s = fit(dataset.slice(axis, idx), scfg);

        if (!have_meta) {
            out.mask = dataset.mask_ptr();
            out.n_scanners = s.n_scanners;
            out.scanner_names = s.scanner_names;
            out.images_per_scanner = s.images_per_scanner;
            out.covariate_names = s.covariate_names;
            out.subject_names = s.subject_names;
            out.longitudinal = s.longitudinal;
            out.time_interactions = s.time_interactions;
            out.draws = s.draws;
            out.mu.assign(s.draws * p, 0.0);
            out.theta.assign(s.theta.size(), std::vector<double>(s.draws * p, 0.0));
            out.gamma.assign(s.gamma.size(), std::vector<double>(s.draws * p, 0.0));
            out.sigma2.assign(s.sigma2.size(), std::vector<double>(s.draws * p, 0.0));
            out.subject_mean.assign(s.subject_mean.size(), std::vector<double>(p, 0.0));
            out.fitted.assign(p, 0);
            out.seed = config.seed;
            out.config_hash = config_hash(config);
            rss.assign(s.trace.size(), 0.0);
            have_meta = true;
        }
        const std::size_t ps = s.voxels();
        std::vector<std::size_t> target(ps);
        const Dims& sd = s.mask->dims();
        for (std::size_t u = 0; u < ps; ++u) {
            const auto c = sd.coords(s.mask->voxels()[u]);
            target[u] = mask.compact_index(slice_to_volume(dims, axis, idx, c[0], c[1]));
            out.fitted[target[u]] = 1;
        }
        auto scatter = [&](const std::vector<double>& src, std::vector<double>& dst) {
            for (std::size_t t = 0; t < s.draws; ++t)
                for (std::size_t u = 0; u < ps; ++u) dst[t * p + target[u]] = src[t * ps + u];
        };
        scatter(s.mu, out.mu);
        for (std::size_t c = 0; c < s.theta.size(); ++c) scatter(s.theta[c], out.theta[c]);
        for (std::size_t j = 0; j < s.gamma.size(); ++j) scatter(s.gamma[j], out.gamma[j]);
        for (std::size_t j = 0; j < s.sigma2.size(); ++j) scatter(s.sigma2[j], out.sigma2[j]);
        for (std::size_t i = 0; i < s.subject_mean.size(); ++i)
            for (std::size_t u = 0; u < ps; ++u) out.subject_mean[i][target[u]] = s.subject_mean[i][u];
        const std::string prefix = "slice" + std::to_string(idx + 1) + "/";
        for (const auto& l : s.alpha_labels) out.alpha_labels.push_back(prefix + l);
        out.alpha_accepted.insert(out.alpha_accepted.end(), s.alpha_accepted.begin(), s.alpha_accepted.end());
        out.alpha_proposed.insert(out.alpha_proposed.end(), s.alpha_proposed.begin(), s.alpha_proposed.end());
        out.clamp_warnings += s.clamp_warnings;
        for (std::size_t t = 0; t < s.trace.size(); ++t) rss[t] += std::exp(s.trace[t]);
    }
    if (!have_meta) throw DataError("no slice has enough unmasked voxels to fit");
    // Unfitted voxels carry a unit noise variance so that downstream ratios stay finite.
    for (std::size_t v = 0; v < p; ++v)
        if (!out.fitted[v])
            for (auto& f : out.sigma2)
                for (std::size_t t = 0; t < out.draws; ++t) f[t * p + v] = 1.0;
    for (double x : rss) out.trace.push_back(std::log(x));
    return out;
}

PosteriorStore fit_chains(const StudyDataset& dataset, const SamplerConfig& config, std::size_t chains,
                          bool slicewise) {
    if (chains < 1) throw ConfigError("chains must be >= 1");
    if (chains > 1 && (config.checkpoint_every > 0 || config.stop_after > 0))
        throw ConfigError("checkpointing is supported for single-chain runs only");
    config.validate();
    std::vector<PosteriorStore> results(chains);
    std::vector<std::exception_ptr> errors(chains);
    auto run = [&](std::size_t c) {
        try {
            SamplerConfig cc = config;
            cc.stream_id = config.stream_id + c;
            results[c] = slicewise ? fit_slicewise(dataset, cc) : fit(dataset, cc);
        } catch (...) {
            errors[c] = std::current_exception();
        }
    };
    if (chains == 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t c = 0; c < chains; ++c) pool.emplace_back(run, c);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    PosteriorStore out = std::move(results[0]);
    for (std::size_t c = 1; c < chains; ++c) {
        const auto& s = results[c];
        auto cat = [](std::vector<double>& dst, const std::vector<double>& src) {
            dst.insert(dst.end(), src.begin(), src.end());
        };
        cat(out.mu, s.mu);
        for (std::size_t i = 0; i < out.theta.size(); ++i) cat(out.theta[i], s.theta[i]);
        for (std::size_t i = 0; i < out.gamma.size(); ++i) cat(out.gamma[i], s.gamma[i]);
        for (std::size_t i = 0; i < out.sigma2.size(); ++i) cat(out.sigma2[i], s.sigma2[i]);
        for (std::size_t i = 0; i < out.subject_mean.size(); ++i)
            for (std::size_t v = 0; v < out.subject_mean[i].size(); ++v)
                out.subject_mean[i][v] += (s.subject_mean[i][v] - out.subject_mean[i][v]) / static_cast<double>(c + 1);
        for (std::size_t i = 0; i < out.alpha_accepted.size(); ++i) {
            out.alpha_accepted[i] += s.alpha_accepted[i];
            out.alpha_proposed[i] += s.alpha_proposed[i];
        }
        cat(out.trace, s.trace);
        out.clamp_warnings += s.clamp_warnings;
        out.draws += s.draws;
    }
    return out;
}

}  // namespace tcombat
