#include "tcombat/harmonize.hpp"

#include <cmath>
#include <map>

#include "tcombat/errors.hpp"
#include "tcombat/linalg.hpp"

namespace tcombat {

namespace {

Tensor3 compact_tensor(const MaskPtr& mask, const std::vector<double>& values) {
    return Tensor3::from_masked(mask, values);
}

template <typename Row>
Tensor3 row_tensor(const MaskPtr& mask, const Row& row) {
    std::vector<double> v(static_cast<std::size_t>(row.size()));
    for (Eigen::Index c = 0; c < row.size(); ++c) v[static_cast<std::size_t>(c)] = row(c);
    return Tensor3::from_masked(mask, v);
}

void require_scanners(const StudyDataset& data) {
    if (data.n_scanners() < 2) throw DataError("harmonization needs at least two scanners");
}

}  // namespace

HarmonizationOutput tensor_combat_adjust(const StudyDataset& input, const PosteriorStore& store) {
    if (store.draws == 0) throw DataError("posterior store has no retained draws");
    if (!store.mask || !(*store.mask == input.mask())) throw DimsError("posterior store mask differs from the dataset");
    const StudyDataset data =
        store.longitudinal ? input.with_time_covariates(store.time_interactions) : input;
    if (store.covariate_names != data.covariate_names())
        throw DataError("posterior store covariates differ from the dataset");
    if (store.scanner_names != data.scanner_names() || store.images_per_scanner != data.images_per_scanner())
        throw DataError("posterior store scanners differ from the dataset");

    const auto& mask = data.mask_ptr();
    const std::size_t p = mask->count();
    const std::size_t k = data.n_scanners();
    const std::size_t q = data.n_covariates();

    const auto mu = store.mean(store.mu);
    std::vector<std::vector<double>> theta(q), gamma(k), sd(k);
    for (std::size_t s = 0; s < q; ++s) theta[s] = store.mean(store.theta[s]);
    for (std::size_t j = 0; j < k; ++j) {
        gamma[j] = store.mean(store.gamma[j]);
        sd[j] = store.mean_sd(j);
    }
    double n_total = 0.0;
    for (auto n : store.images_per_scanner) n_total += static_cast<double>(n);
    std::vector<double> sbar(p, 0.0);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t v = 0; v < p; ++v) sbar[v] += static_cast<double>(store.images_per_scanner[j]) * sd[j][v];
    for (auto& s : sbar) s /= n_total;
    std::vector<std::vector<double>> delta(k, std::vector<double>(p, 1.0));
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t v = 0; v < p; ++v)
            if (store.fitted[v]) delta[j][v] = sd[j][v] / sbar[v];

    std::map<std::string, std::size_t> subject_index;
    for (std::size_t i = 0; i < store.subject_names.size(); ++i) subject_index[store.subject_names[i]] = i;

    HarmonizationOutput out;
    out.method = "tc";
    out.adjusted = store.fitted;
    const auto& vox = mask->voxels();
    const auto& x = data.covariates();
    for (std::size_t i = 0; i < data.n_images(); ++i) {
        const std::size_t j = data.scanner_of(i);
        const std::vector<double>* b = nullptr;
        if (store.longitudinal) {
            const auto it = subject_index.find(data.record(i).subject);
            if (it == subject_index.end()) throw DataError("subject " + data.record(i).subject + " missing from store");
            b = &store.subject_mean[it->second];
        }
        const auto& img = data.image(i);
        std::vector<double> y(p);
        for (std::size_t v = 0; v < p; ++v) {
            const double yv = img[vox[v]];
            if (!store.fitted[v]) {
                y[v] = yv;
                continue;
            }
            double fit = mu[v];
            for (std::size_t s = 0; s < q; ++s)
                fit += theta[s][v] * x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
            const double bv = b ? (*b)[v] : 0.0;
            y[v] = (yv - fit - gamma[j][v] - bv) / delta[j][v] + fit + bv;
            if (!std::isfinite(y[v])) throw DivergenceError("non-finite harmonized value", 0);
        }
        out.images.push_back(compact_tensor(mask, y));
    }
    out.mu = compact_tensor(mask, mu);
    for (std::size_t s = 0; s < q; ++s) out.theta.push_back(compact_tensor(mask, theta[s]));
    for (std::size_t j = 0; j < k; ++j) {
        out.gamma.push_back(compact_tensor(mask, gamma[j]));
        out.delta.push_back(compact_tensor(mask, delta[j]));
    }
    out.config_hash = store.config_hash;
    out.seed = store.seed;
    out.draws = store.draws;
    out.warnings = store.clamp_warnings;
    return out;
}

CombatEBParams combat_fit(const StudyDataset& data, const CombatOptions& opt) {
    require_scanners(data);
    const std::size_t k = data.n_scanners();
    const auto n_img = static_cast<Eigen::Index>(data.n_images());
    const auto q = static_cast<Eigen::Index>(data.n_covariates());
    const auto counts = data.images_per_scanner();
    for (auto c : counts)
        if (c < 2) throw DataError("every scanner needs at least two images for ComBat");

    const RowMatrix y = image_matrix(data);
    const Eigen::Index p = y.cols();
    Eigen::MatrixXd design = Eigen::MatrixXd::Zero(n_img, static_cast<Eigen::Index>(k) + q);
    for (Eigen::Index i = 0; i < n_img; ++i) design(i, static_cast<Eigen::Index>(data.scanner_of(static_cast<std::size_t>(i)))) = 1.0;
    if (q > 0) design.rightCols(q) = data.covariates();
    const auto fit = ols(design, y);
    if (!fit.full_rank()) throw DataError("ComBat design matrix is rank deficient");

    CombatEBParams prm;
    prm.scanner_names = data.scanner_names();
    prm.empirical_bayes = opt.empirical_bayes;
    prm.alpha.assign(static_cast<std::size_t>(p), 0.0);
    prm.var_pooled.assign(static_cast<std::size_t>(p), 0.0);
    prm.usable.assign(static_cast<std::size_t>(p), 1);
    prm.beta = q > 0 ? Eigen::MatrixXd(fit.coef.bottomRows(q)) : Eigen::MatrixXd(0, p);
    const double n_total = static_cast<double>(n_img);
    for (Eigen::Index v = 0; v < p; ++v) {
        double g = 0.0;
        for (std::size_t j = 0; j < k; ++j)
            g += static_cast<double>(counts[j]) * fit.coef(static_cast<Eigen::Index>(j), v);
        prm.alpha[static_cast<std::size_t>(v)] = g / n_total;
        prm.var_pooled[static_cast<std::size_t>(v)] = fit.residuals.col(v).squaredNorm() / n_total;
        if (!(prm.var_pooled[static_cast<std::size_t>(v)] > 0.0)) prm.usable[static_cast<std::size_t>(v)] = 0;
    }

    // Standardized data.
    Eigen::MatrixXd s(n_img, p);
    for (Eigen::Index i = 0; i < n_img; ++i)
        for (Eigen::Index v = 0; v < p; ++v) {
            const auto vv = static_cast<std::size_t>(v);
            if (!prm.usable[vv]) {
                s(i, v) = 0.0;
                continue;
            }
            double m = prm.alpha[vv];
            for (Eigen::Index c = 0; c < q; ++c) m += data.covariates()(i, c) * prm.beta(c, v);
            s(i, v) = (y(i, v) - m) / std::sqrt(prm.var_pooled[vv]);
        }

    const auto kk = static_cast<Eigen::Index>(k);
    prm.gamma_hat = Eigen::MatrixXd::Zero(kk, p);
    prm.delta2_hat = Eigen::MatrixXd::Zero(kk, p);
    std::vector<std::vector<Eigen::Index>> members(k);
    for (Eigen::Index i = 0; i < n_img; ++i) members[data.scanner_of(static_cast<std::size_t>(i))].push_back(i);
    for (std::size_t j = 0; j < k; ++j) {
        const double nj = static_cast<double>(members[j].size());
        const auto jj = static_cast<Eigen::Index>(j);
        for (Eigen::Index v = 0; v < p; ++v) {
            double m = 0.0;
            for (auto i : members[j]) m += s(i, v);
            m /= nj;
            double ss = 0.0;
            for (auto i : members[j]) ss += (s(i, v) - m) * (s(i, v) - m);
            double d2 = ss / (nj - 1.0);
            if (prm.usable[static_cast<std::size_t>(v)] && d2 < opt.delta_floor) {
                d2 = opt.delta_floor;
                ++prm.warnings;
            }
            if (!prm.usable[static_cast<std::size_t>(v)]) d2 = 1.0;
            prm.gamma_hat(jj, v) = m;
            prm.delta2_hat(jj, v) = d2;
        }
    }
    prm.gamma_star = prm.gamma_hat;
    prm.delta2_star = prm.delta2_hat;
    prm.gamma_bar.assign(k, 0.0);
    prm.tau2_bar.assign(k, 0.0);
    prm.lambda_bar.assign(k, 0.0);
    prm.theta_bar.assign(k, 0.0);

    std::vector<Eigen::Index> use;
    for (Eigen::Index v = 0; v < p; ++v)
        if (prm.usable[static_cast<std::size_t>(v)]) use.push_back(v);
    if (use.size() < 2) {
        prm.empirical_bayes = false;
        return prm;
    }
    const double nu = static_cast<double>(use.size());
    for (std::size_t j = 0; j < k; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        double gm = 0.0, dm = 0.0;
        for (auto v : use) {
            gm += prm.gamma_hat(jj, v);
            dm += prm.delta2_hat(jj, v);
        }
        gm /= nu;
        dm /= nu;
        double gv = 0.0, dv = 0.0;
        for (auto v : use) {
            gv += (prm.gamma_hat(jj, v) - gm) * (prm.gamma_hat(jj, v) - gm);
            dv += (prm.delta2_hat(jj, v) - dm) * (prm.delta2_hat(jj, v) - dm);
        }
        gv /= nu - 1.0;
        dv /= nu - 1.0;
        prm.gamma_bar[j] = gm;
        prm.tau2_bar[j] = gv;
        prm.lambda_bar[j] = dv > 0.0 ? (2.0 * dv + dm * dm) / dv : std::numeric_limits<double>::infinity();
        prm.theta_bar[j] = dv > 0.0 ? (dm * dv + dm * dm * dm) / dv : std::numeric_limits<double>::infinity();
    }
    if (!opt.empirical_bayes) return prm;

    prm.converged = true;
    for (std::size_t j = 0; j < k; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const double nj = static_cast<double>(members[j].size());
        const double t2 = prm.tau2_bar[j];
        const double a = prm.lambda_bar[j];
        const double b = prm.theta_bar[j];
        if (!(t2 > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
            ++prm.warnings;
            continue;  // degenerate prior: keep the unpooled estimates
        }
        std::vector<double> g_old(use.size()), d_old(use.size()), g_new(use.size()), d_new(use.size());
        for (std::size_t u = 0; u < use.size(); ++u) {
            g_old[u] = prm.gamma_hat(jj, use[u]);
            d_old[u] = prm.delta2_hat(jj, use[u]);
        }
        bool done = false;
        std::size_t it = 0;
        while (!done && it < opt.max_iterations) {
            ++it;
            double change = 0.0;
            for (std::size_t u = 0; u < use.size(); ++u) {
                const auto v = use[u];
                const double gh = prm.gamma_hat(jj, v);
                g_new[u] = (nj * t2 * gh + d_old[u] * prm.gamma_bar[j]) / (nj * t2 + d_old[u]);
                double sum2 = 0.0;
                for (auto i : members[j]) sum2 += (s(i, v) - g_new[u]) * (s(i, v) - g_new[u]);
                d_new[u] = (b + 0.5 * sum2) / (0.5 * nj + a - 1.0);
                change = std::max(change, std::abs(g_new[u] - g_old[u]) / std::max(std::abs(g_old[u]), 1e-12));
                change = std::max(change, std::abs(d_new[u] - d_old[u]) / d_old[u]);
            }
            g_old = g_new;
            d_old = d_new;
            done = change < opt.tolerance;
        }
        prm.iterations = std::max(prm.iterations, it);
        if (!done) prm.converged = false;
        for (std::size_t u = 0; u < use.size(); ++u) {
            prm.gamma_star(jj, use[u]) = g_old[u];
            prm.delta2_star(jj, use[u]) = std::max(d_old[u], opt.delta_floor);
        }
    }
    return prm;
}

HarmonizationOutput combat_adjust(const StudyDataset& data, const CombatEBParams& prm) {
    if (prm.scanner_names != data.scanner_names()) throw DataError("ComBat parameters were fitted on other scanners");
    const RowMatrix y = image_matrix(data);
    const Eigen::Index p = y.cols();
    if (static_cast<std::size_t>(p) != prm.alpha.size()) throw DimsError("ComBat parameters do not match the mask");
    const auto q = static_cast<Eigen::Index>(data.n_covariates());
    if (prm.beta.rows() != q) throw DataError("ComBat parameters were fitted with other covariates");
    RowMatrix out(y.rows(), p);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const auto j = static_cast<Eigen::Index>(data.scanner_of(static_cast<std::size_t>(i)));
        for (Eigen::Index v = 0; v < p; ++v) {
            const auto vv = static_cast<std::size_t>(v);
            if (!prm.usable[vv]) {
                out(i, v) = y(i, v);
                continue;
            }
            double m = prm.alpha[vv];
            for (Eigen::Index c = 0; c < q; ++c) m += data.covariates()(i, c) * prm.beta(c, v);
            const double sd = std::sqrt(prm.var_pooled[vv]);
            const double z = (y(i, v) - m) / sd;
            out(i, v) = (z - prm.gamma_star(j, v)) / std::sqrt(prm.delta2_star(j, v)) * sd + m;
        }
    }
    HarmonizationOutput h;
    h.method = "combat";
    const auto& mask = data.mask_ptr();
    h.images = images_from_matrix(mask, out);
    h.adjusted = prm.usable;
    h.mu = compact_tensor(mask, prm.alpha);
    for (Eigen::Index c = 0; c < q; ++c) h.theta.push_back(row_tensor(mask, prm.beta.row(c)));
    for (Eigen::Index j = 0; j < prm.gamma_star.rows(); ++j) {
        std::vector<double> g(static_cast<std::size_t>(p)), d(static_cast<std::size_t>(p));
        for (Eigen::Index v = 0; v < p; ++v) {
            const auto vv = static_cast<std::size_t>(v);
            g[vv] = prm.gamma_star(j, v) * std::sqrt(prm.var_pooled[vv]);
            d[vv] = std::sqrt(prm.delta2_star(j, v));
        }
        h.gamma.push_back(compact_tensor(mask, g));
        h.delta.push_back(compact_tensor(mask, d));
    }
    h.warnings = prm.warnings;
    return h;
}

namespace {

HarmonizationOutput residual_method(const StudyDataset& data, bool with_covariates, bool remove_covariates,
                                    const char* tag) {
    require_scanners(data);
    const std::size_t k = data.n_scanners();
    const auto n_img = static_cast<Eigen::Index>(data.n_images());
    const auto q = with_covariates ? static_cast<Eigen::Index>(data.n_covariates()) : 0;
    const auto coding = sum_to_zero_coding(data.scanner_of_images(), k);
    const auto kc = static_cast<Eigen::Index>(k - 1);
    Eigen::MatrixXd design(n_img, 1 + q + kc);
    design.col(0).setOnes();
    if (q > 0) design.middleCols(1, q) = data.covariates();
    design.rightCols(kc) = coding.columns;

    const RowMatrix y = image_matrix(data);
    const Eigen::Index p = y.cols();
    const auto& mask = data.mask_ptr();
    HarmonizationOutput h;
    h.method = tag;
    if (n_img <= design.cols()) throw DataError("too few images for the residual model");
    const auto fit = ols(design, y);
    if (!fit.full_rank()) {
        // Rank-deficient design: every voxel is flagged and passed through.
        h.images = data.images();
        h.adjusted.assign(static_cast<std::size_t>(p), 0);
        h.warnings = static_cast<std::uint64_t>(p);
        h.mu = compact_tensor(mask, std::vector<double>(static_cast<std::size_t>(p), 0.0));
        for (std::size_t j = 0; j < k; ++j) {
            h.gamma.push_back(compact_tensor(mask, std::vector<double>(static_cast<std::size_t>(p), 0.0)));
            h.delta.push_back(compact_tensor(mask, std::vector<double>(static_cast<std::size_t>(p), 1.0)));
        }
        return h;
    }
    const Eigen::MatrixXd gamma = coding.to_effects * fit.coef.bottomRows(kc);  // K x P
    RowMatrix out = y;
    for (Eigen::Index i = 0; i < n_img; ++i) {
        const auto j = static_cast<Eigen::Index>(data.scanner_of(static_cast<std::size_t>(i)));
        out.row(i) -= gamma.row(j);
        if (remove_covariates && q > 0) out.row(i) -= data.covariates().row(i) * fit.coef.middleRows(1, q);
    }
    h.images = images_from_matrix(mask, out);
    h.adjusted.assign(static_cast<std::size_t>(p), 1);
    h.mu = row_tensor(mask, fit.coef.row(0));
    for (Eigen::Index c = 0; c < q; ++c) h.theta.push_back(row_tensor(mask, fit.coef.row(1 + c)));
    for (std::size_t j = 0; j < k; ++j) {
        h.gamma.push_back(row_tensor(mask, gamma.row(static_cast<Eigen::Index>(j))));
        h.delta.push_back(compact_tensor(mask, std::vector<double>(static_cast<std::size_t>(p), 1.0)));
    }
    return h;
}

}  // namespace

HarmonizationOutput adjusted_residuals(const StudyDataset& data, const ResidualOptions& options) {
    return residual_method(data, true, options.remove_covariates, "ar");
}

HarmonizationOutput unadjusted_residuals(const StudyDataset& data) {
    return residual_method(data, false, false, "ua");
}

HarmonizationOutput no_harmonization(const StudyDataset& data) {
    HarmonizationOutput h;
    h.method = "none";
    h.images = data.images();
    const auto& mask = data.mask_ptr();
    const std::size_t p = mask->count();
    h.adjusted.assign(p, 0);
    h.mu = compact_tensor(mask, std::vector<double>(p, 0.0));
    for (std::size_t j = 0; j < data.n_scanners(); ++j) {
        h.gamma.push_back(compact_tensor(mask, std::vector<double>(p, 0.0)));
        h.delta.push_back(compact_tensor(mask, std::vector<double>(p, 1.0)));
    }
    return h;
}

}  // namespace tcombat
