#include "tcombat/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "tcombat/errors.hpp"
#include "tcombat/random.hpp"

namespace tcombat {

namespace {

std::vector<double> gaussian_bump(std::size_t p, double center, double width) {
    std::vector<double> g(p);
    for (std::size_t i = 0; i < p; ++i) {
        const double u = (static_cast<double>(i) - center) / width;
        g[i] = std::exp(-0.5 * u * u);
    }
    return g;
}

/// Low-frequency profile number r on p points.
std::vector<double> smooth_profile(std::size_t p, std::size_t r) {
    std::vector<double> g(p);
    for (std::size_t i = 0; i < p; ++i) {
        const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(p);
        g[i] = r % 2 == 0 ? std::sin(std::numbers::pi * x * static_cast<double>(r / 2 + 1))
                          : std::cos(std::numbers::pi * x * static_cast<double>(r / 2 + 1));
    }
    return g;
}

std::vector<double> outer3(const Dims& dims, const std::vector<double>& a, const std::vector<double>& b,
                           const std::vector<double>& c) {
    std::vector<double> out(dims.size());
    for (std::size_t i = 0; i < dims[0]; ++i)
        for (std::size_t j = 0; j < dims[1]; ++j)
            for (std::size_t k = 0; k < dims[2]; ++k) out[dims.flat(i, j, k)] = a[i] * b[j] * c[k];
    return out;
}

std::string numbered(const char* prefix, std::size_t i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i + 1);
    return buf;
}

}  // namespace

void SimConfig::validate() const {
    if (dims.size() == 0) throw ConfigError("dims must be non-empty");
    if (subjects == 0) throw ConfigError("subjects must be >= 1");
    if (scanners == 0) throw ConfigError("scanners must be >= 1");
    if (scanners > subjects) throw ConfigError("more scanners than subjects");
    if (visits < 1 || visits > 3) throw ConfigError("visits must be 1, 2 or 3");
    if (!(delta_low > 0.0) || !(delta_high > 0.0)) throw ConfigError("delta levels must be positive");
    if (!(snr > 0.0)) throw ConfigError("snr must be positive");
    if (noise_sd && !(*noise_sd >= 0.0)) throw ConfigError("noise_sd must be non-negative");
    if (!(block_fraction > 0.0 && block_fraction <= 1.0)) throw ConfigError("block_fraction must lie in (0, 1]");
    if (!(binary_rate >= 0.0 && binary_rate <= 1.0)) throw ConfigError("binary_rate must lie in [0, 1]");
    if (covariates > 0 && effect_amplitudes.empty()) throw ConfigError("effect_amplitudes is empty");
}

std::pair<StudyDataset, GroundTruth> simulate_study(const SimConfig& cfg) {
    cfg.validate();
    RngStream rng(cfg.seed, 0);
    const Dims& dims = cfg.dims;
    const std::size_t nv = dims.size();
    auto mask = full_mask(dims);
    const std::size_t k = cfg.scanners;
    const std::size_t n = cfg.subjects;
    const std::size_t q = cfg.covariates;

    GroundTruth truth;
    for (std::size_t j = 0; j < k; ++j) truth.scanner_names.push_back(numbered("scanner", j, 2));
    for (std::size_t i = 0; i < n; ++i) {
        truth.subject_names.push_back(numbered("sub", i, 3));
        truth.scanner_of_subject.push_back(i % k);
    }
    std::vector<std::size_t> images_per_scanner(k, 0);
    for (std::size_t i = 0; i < n; ++i) images_per_scanner[i % k] += cfg.visits;
    const double n_images = static_cast<double>(n * cfg.visits);

    auto bump = [&](double c0, double c1, double c2) {
        return outer3(dims, gaussian_bump(dims[0], c0 * (dims[0] - 1.0), std::max(1.0, dims[0] / 4.0)),
                      gaussian_bump(dims[1], c1 * (dims[1] - 1.0), std::max(1.0, dims[1] / 4.0)),
                      gaussian_bump(dims[2], c2 * (dims[2] - 1.0), std::max(1.0, dims[2] / 4.0)));
    };

    // Intercept.
    {
        auto m = bump(0.5, 0.5, 0.5);
        for (auto& x : m) x = cfg.mean_level + cfg.mean_bump * x;
        truth.mu = Tensor3(mask, std::move(m));
    }
    // Covariate templates at staggered centers.
    for (std::size_t s = 0; s < q; ++s) {
        const double amp = cfg.effect_amplitudes[std::min(s, cfg.effect_amplitudes.size() - 1)];
        const double c = 0.25 + 0.5 * static_cast<double>(s % 3) / 2.0;
        auto t = bump(c, 1.0 - c, s % 2 == 0 ? 0.3 : 0.7);
        for (auto& x : t) x *= amp;
        truth.theta.push_back(Tensor3(mask, std::move(t)));
    }
    {
        auto t = bump(0.7, 0.3, 0.5);
        for (auto& x : t) x *= cfg.longitudinal ? cfg.time_effect / 12.0 : 0.0;
        truth.theta_time = Tensor3(mask, std::move(t));
    }

    // Scanner maps: smooth PARAFAC part with weighted-centered loadings.
    std::vector<std::vector<double>> gamma(k, std::vector<double>(nv, 0.0));
    for (std::size_t r = 0; r < cfg.gamma_rank; ++r) {
        const auto pattern =
            outer3(dims, smooth_profile(dims[0], r), smooth_profile(dims[1], r + 1), smooth_profile(dims[2], r));
        std::vector<double> c(k);
        double cbar = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            c[j] = rng.standard_normal();
            cbar += static_cast<double>(images_per_scanner[j]) * c[j];
        }
        cbar /= n_images;
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t v = 0; v < nv; ++v) gamma[j][v] += cfg.gamma_amplitude * (c[j] - cbar) * pattern[v];
    }
    // Localized block.
    std::array<std::size_t, 3> lo{}, hi{};
    for (std::size_t d = 0; d < 3; ++d) {
        const std::size_t len = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(cfg.block_fraction * static_cast<double>(dims[d]) - 1e-9)));
        const std::size_t slack = dims[d] - len;
        lo[d] = std::min(slack, static_cast<std::size_t>(rng.uniform() * static_cast<double>(slack + 1)));
        hi[d] = lo[d] + len;
    }
    std::vector<double> block(nv, 0.0);
    for (std::size_t i = lo[0]; i < hi[0]; ++i)
        for (std::size_t j = lo[1]; j < hi[1]; ++j)
            for (std::size_t l = lo[2]; l < hi[2]; ++l) block[dims.flat(i, j, l)] = 1.0;
    truth.block = Tensor3(mask, block);
    {
        // Evenly spaced levels in [-1, 1], randomly assigned to scanners.
        std::vector<double> level(k, 0.0);
        for (std::size_t j = 0; j < k; ++j)
            level[j] = k == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(k - 1);
        for (std::size_t j = k; j > 1; --j) {
            const auto swap_with = static_cast<std::size_t>(rng.uniform() * static_cast<double>(j));
            std::swap(level[j - 1], level[std::min(swap_with, j - 1)]);
        }
        double abar = 0.0;
        for (std::size_t j = 0; j < k; ++j) abar += static_cast<double>(images_per_scanner[j]) * level[j];
        abar /= n_images;
        for (std::size_t j = 0; j < k; ++j) {
            const double a = cfg.block_amplitude * (level[j] - abar);
            truth.block_levels.push_back(a);
            for (std::size_t v = 0; v < nv; ++v) gamma[j][v] += a * block[v];
        }
    }
    double ss = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        for (double g : gamma[j]) ss += g * g;
        truth.gamma.push_back(Tensor3(mask, gamma[j]));
    }
    const double rms = std::sqrt(ss / static_cast<double>(k * nv));
    truth.noise_sd = cfg.noise_sd ? *cfg.noise_sd : (rms > 0.0 ? rms / cfg.snr : 1.0 / cfg.snr);

    // Two-level scale pattern: first half along mode 1 versus the rest, swapped on odd scanners.
    for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> d(nv);
        for (std::size_t v = 0; v < nv; ++v) {
            const bool first = dims.coords(v)[0] < (dims[0] + 1) / 2;
            d[v] = (first == (j % 2 == 0)) ? cfg.delta_low : cfg.delta_high;
        }
        truth.delta.push_back(Tensor3(mask, std::move(d)));
    }

    // Subject intercepts.
    if (cfg.longitudinal) {
        const auto tmpl = bump(0.4, 0.6, 0.5);
        std::vector<double> b(n);
        double bbar = 0.0;
        for (auto& x : b) {
            x = cfg.subject_sd * rng.standard_normal();
            bbar += x;
        }
        bbar /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> m(nv);
            for (std::size_t v = 0; v < nv; ++v) m[v] = (b[i] - bbar) * (0.5 + tmpl[v]);
            truth.subject.push_back(Tensor3(mask, std::move(m)));
        }
    }

    // Subject covariates.
    Eigen::MatrixXd subj_x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(q));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < q; ++s)
            subj_x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) =
                s == 0 ? rng.standard_normal() : (rng.uniform() < cfg.binary_rate ? 1.0 : 0.0);

    const std::size_t n_img = n * cfg.visits;
    Eigen::MatrixXd raw(static_cast<Eigen::Index>(n_img), static_cast<Eigen::Index>(q));
    std::vector<ImageRecord> records;
    std::vector<std::string> labels;
    std::vector<std::string> names;
    for (std::size_t s = 0; s < q; ++s) names.push_back(s == 0 ? "age" : numbered("x", s, 1));
    std::vector<Tensor3> images;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < cfg.visits; ++t) {
            const auto row = static_cast<Eigen::Index>(records.size());
            ImageRecord rec{truth.subject_names[i], static_cast<int>(t + 1),
                            cfg.visit_interval_months * static_cast<double>(t)};
            for (std::size_t s = 0; s < q; ++s)
                raw(row, static_cast<Eigen::Index>(s)) =
                    subj_x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) +
                    (s == 0 ? cfg.age_per_visit * static_cast<double>(t) : 0.0);
            std::vector<double> eps(nv);
            for (auto& e : eps) e = truth.noise_sd * rng.standard_normal();
            truth.epsilon.push_back(Tensor3(mask, std::move(eps)));
            records.push_back(rec);
            labels.push_back(truth.scanner_names[i % k]);
            images.emplace_back(mask);
        }
    }
    StudyDataset shell(mask, images, records, labels, names, raw);
    for (std::size_t e = 0; e < n_img; ++e) images[e] = reconstruct_image(truth, shell, e);
    return {shell.with_images(std::move(images)), std::move(truth)};
}

Tensor3 reconstruct_image(const GroundTruth& truth, const StudyDataset& data, std::size_t image) {
    const auto& scanner_name = data.scanner_names()[data.scanner_of(image)];
    const auto jt = std::find(truth.scanner_names.begin(), truth.scanner_names.end(), scanner_name);
    if (jt == truth.scanner_names.end()) throw DataError("scanner " + scanner_name + " not in ground truth");
    const auto j = static_cast<std::size_t>(jt - truth.scanner_names.begin());
    const auto& rec = data.record(image);
    const std::size_t nv = truth.mu.size();
    std::vector<double> y(nv);
    const auto& x = data.raw_covariates();
    const auto row = static_cast<Eigen::Index>(image);
    for (std::size_t v = 0; v < nv; ++v) {
        double val = truth.mu[v] + truth.gamma[j][v];
        for (std::size_t s = 0; s < truth.theta.size(); ++s)
            val += truth.theta[s][v] * x(row, static_cast<Eigen::Index>(s));
        if (truth.theta_time.size() == nv) val += truth.theta_time[v] * rec.visit_months;
        val += truth.delta[j][v] * truth.epsilon[image][v];
        y[v] = val;
    }
    if (!truth.subject.empty()) {
        const auto it = std::find(truth.subject_names.begin(), truth.subject_names.end(), rec.subject);
        if (it == truth.subject_names.end()) throw DataError("subject " + rec.subject + " not in ground truth");
        const auto& b = truth.subject[static_cast<std::size_t>(it - truth.subject_names.begin())];
        for (std::size_t v = 0; v < nv; ++v) y[v] += b[v];
    }
    return Tensor3(truth.mu.mask_ptr(), std::move(y));
}

}  // namespace tcombat
