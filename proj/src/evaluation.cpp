#include "tcombat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "tcombat/errors.hpp"
#include "tcombat/linalg.hpp"

namespace tcombat {

namespace {

constexpr double kSdFloor = 1e-12;

std::vector<std::vector<std::size_t>> group_members(const std::vector<std::size_t>& scanner_of) {
    std::size_t k = 0;
    for (auto j : scanner_of) k = std::max(k, j + 1);
    std::vector<std::vector<std::size_t>> g(k);
    for (std::size_t i = 0; i < scanner_of.size(); ++i) g[scanner_of[i]].push_back(i);
    return g;
}

void check_images(const std::vector<Tensor3>& images, const std::vector<std::size_t>& scanner_of) {
    if (images.empty()) throw DataError("no images");
    if (images.size() != scanner_of.size()) throw DataError("image and scanner counts differ");
    for (const auto& img : images)
        if (!(img.mask() == images.front().mask())) throw DimsError("images do not share a mask");
}

}  // namespace

// ---------------------------------------------------------------------------

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimsError("correlation inputs differ in length");
    if (a.empty()) return std::nullopt;
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double PairwiseScannerReport::mean_rmse() const {
    if (pairs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& p : pairs) s += p.rmse;
    return s / static_cast<double>(pairs.size());
}

double PairwiseScannerReport::mean_correlation() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs)
        if (p.correlation) {
            s += *p.correlation;
            ++n;
        }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

PairwiseScannerReport scanner_pairwise_metrics(const std::vector<Tensor3>& images,
                                               const std::vector<std::size_t>& scanner_of,
                                               const std::vector<std::string>& names) {
    check_images(images, scanner_of);
    const auto groups = group_members(scanner_of);
    const std::size_t k = groups.size();
    if (k < 2) throw DataError("pairwise metrics need at least two scanners");
    const auto& vox = images.front().mask().voxels();
    const std::size_t p = vox.size();
    std::vector<std::vector<double>> means(k, std::vector<double>(p, 0.0));
    for (std::size_t j = 0; j < k; ++j) {
        if (groups[j].empty()) throw DataError("scanner without images");
        for (auto i : groups[j])
            for (std::size_t v = 0; v < p; ++v) means[j][v] += images[i][vox[v]];
        for (auto& m : means[j]) m /= static_cast<double>(groups[j].size());
    }
    PairwiseScannerReport rep;
    rep.scanner_names = names;
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a + 1; b < k; ++b) {
            PairMetric m{a, b, std::nullopt, 0.0};
            double ss = 0.0;
            for (std::size_t v = 0; v < p; ++v) ss += (means[a][v] - means[b][v]) * (means[a][v] - means[b][v]);
            m.rmse = std::sqrt(ss / static_cast<double>(p));
            m.correlation = pearson(means[a], means[b]);
            rep.pairs.push_back(m);
        }
    return rep;
}

PairwiseScannerReport scanner_pairwise_metrics(const StudyDataset& data) {
    return scanner_pairwise_metrics(data.images(), data.scanner_of_images(), data.scanner_names());
}

double VoxelTest::fraction_below(double level) const {
    const auto& vox = p_value.mask().voxels();
    if (vox.empty()) return 0.0;
    std::size_t n = 0;
    for (auto f : vox)
        if (p_value[f] < level) ++n;
    return static_cast<double>(n) / static_cast<double>(vox.size());
}

VoxelTest anova_per_voxel(const std::vector<Tensor3>& images, const std::vector<std::size_t>& scanner_of) {
    check_images(images, scanner_of);
    const auto groups = group_members(scanner_of);
    const std::size_t k = groups.size();
    const std::size_t n = images.size();
    if (k < 2 || n <= k) throw DataError("ANOVA needs at least two groups and more images than groups");
    const auto& mask = images.front().mask_ptr();
    const auto& vox = mask->voxels();
    const double df1 = static_cast<double>(k - 1), df2 = static_cast<double>(n - k);
    boost::math::fisher_f_distribution<double> fdist(df1, df2);
    VoxelTest out;
    std::vector<double> p(vox.size());
    out.statistic.resize(vox.size());
    out.degenerate.assign(vox.size(), 0);
    for (std::size_t v = 0; v < vox.size(); ++v) {
        double grand = 0.0;
        for (const auto& img : images) grand += img[vox[v]];
        grand /= static_cast<double>(n);
        double ssb = 0.0, ssw = 0.0;
        for (const auto& g : groups) {
            if (g.empty()) continue;
            double m = 0.0;
            for (auto i : g) m += images[i][vox[v]];
            m /= static_cast<double>(g.size());
            ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
            for (auto i : g) ssw += (images[i][vox[v]] - m) * (images[i][vox[v]] - m);
        }
        if (!(ssw > 0.0)) {
            out.degenerate[v] = 1;
            out.statistic[v] = ssb > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
            p[v] = ssb > 0.0 ? 0.0 : 1.0;
            continue;
        }
        const double f = (ssb / df1) / (ssw / df2);
        out.statistic[v] = f;
        p[v] = boost::math::cdf(boost::math::complement(fdist, f));
    }
    out.p_value = Tensor3::from_masked(mask, p);
    return out;
}

VoxelTest bartlett_per_voxel(const std::vector<Tensor3>& images, const std::vector<std::size_t>& scanner_of) {
    check_images(images, scanner_of);
    const auto groups = group_members(scanner_of);
    const std::size_t k = groups.size();
    if (k < 2) throw DataError("Bartlett test needs at least two groups");
    for (const auto& g : groups)
        if (g.size() < 2) throw DataError("Bartlett test needs at least two images per group");
    const std::size_t n = images.size();
    const auto& mask = images.front().mask_ptr();
    const auto& vox = mask->voxels();
    const double nk = static_cast<double>(n - k);
    double inv_sum = 0.0;
    for (const auto& g : groups) inv_sum += 1.0 / static_cast<double>(g.size() - 1);
    const double correction = 1.0 + (inv_sum - 1.0 / nk) / (3.0 * static_cast<double>(k - 1));
    boost::math::chi_squared_distribution<double> chi(static_cast<double>(k - 1));
    VoxelTest out;
    std::vector<double> p(vox.size());
    out.statistic.resize(vox.size());
    out.degenerate.assign(vox.size(), 0);
    std::vector<double> s2(k);
    for (std::size_t v = 0; v < vox.size(); ++v) {
        double pooled = 0.0;
        bool zero = false, all_zero = true;
        for (std::size_t j = 0; j < k; ++j) {
            const auto& g = groups[j];
            double m = 0.0;
            for (auto i : g) m += images[i][vox[v]];
            m /= static_cast<double>(g.size());
            double ss = 0.0;
            for (auto i : g) ss += (images[i][vox[v]] - m) * (images[i][vox[v]] - m);
            s2[j] = ss / static_cast<double>(g.size() - 1);
            pooled += ss;
            if (!(s2[j] > 0.0)) zero = true;
            else all_zero = false;
        }
        if (zero) {
            out.degenerate[v] = 1;
            out.statistic[v] = all_zero ? 0.0 : std::numeric_limits<double>::infinity();
            p[v] = all_zero ? 1.0 : 0.0;
            continue;
        }
        pooled /= nk;
        double t = nk * std::log(pooled);
        for (std::size_t j = 0; j < k; ++j) t -= static_cast<double>(groups[j].size() - 1) * std::log(s2[j]);
        t = std::max(0.0, t / correction);
        out.statistic[v] = t;
        p[v] = boost::math::cdf(boost::math::complement(chi, t));
    }
    out.p_value = Tensor3::from_masked(mask, p);
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> SignificanceMap::flags() const {
    std::vector<std::uint8_t> f;
    for (auto v : significant.mask().voxels()) f.push_back(significant[v] != 0.0);
    return f;
}

std::size_t SignificanceMap::count() const {
    std::size_t n = 0;
    for (auto v : significant.mask().voxels()) n += significant[v] != 0.0;
    return n;
}

SignificanceMap joint_credible_band(const std::vector<double>& draws, std::size_t t_count, const MaskPtr& mask,
                                    double alpha_level, bool bonferroni) {
    if (!(alpha_level > 0.0 && alpha_level < 1.0)) throw ConfigError("alpha_level must lie in (0, 1)");
    const std::size_t p = mask->count();
    if (draws.size() != t_count * p) throw DataError("draw matrix size does not match the mask");
    if (static_cast<double>(t_count) < 1.0 / alpha_level)
        throw DataError("too few posterior draws for the requested band level");
    SignificanceMap map;
    map.alpha_level = alpha_level;
    map.bonferroni = bonferroni;
    map.mean.assign(p, 0.0);
    map.sd.assign(p, 0.0);
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t v = 0; v < p; ++v) map.mean[v] += draws[t * p + v];
    for (auto& m : map.mean) m /= static_cast<double>(t_count);
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t v = 0; v < p; ++v) {
            const double d = draws[t * p + v] - map.mean[v];
            map.sd[v] += d * d;
        }
    std::size_t varying = 0;
    for (auto& s : map.sd) {
        s = std::sqrt(s / static_cast<double>(t_count - 1));
        if (s >= kSdFloor) ++varying;
    }
    if (bonferroni) {
        boost::math::normal_distribution<double> z;
        const double m = static_cast<double>(std::max<std::size_t>(varying, 1));
        map.q_star = boost::math::quantile(z, 1.0 - alpha_level / (2.0 * m));
    } else if (varying > 0) {
        std::vector<double> mt(t_count, 0.0);
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t v = 0; v < p; ++v)
                if (map.sd[v] >= kSdFloor)
                    mt[t] = std::max(mt[t], std::abs(draws[t * p + v] - map.mean[v]) / map.sd[v]);
        std::sort(mt.begin(), mt.end());
        const auto rank = static_cast<std::size_t>(std::ceil((1.0 - alpha_level) * static_cast<double>(t_count) - 1e-9));
        map.q_star = mt[std::clamp<std::size_t>(rank, 1, t_count) - 1];
    }
    std::vector<double> sig(p, 0.0);
    for (std::size_t v = 0; v < p; ++v) {
        if (map.sd[v] < kSdFloor)
            sig[v] = map.mean[v] != 0.0 ? 1.0 : 0.0;
        else
            sig[v] = std::abs(map.mean[v]) > map.q_star * map.sd[v] ? 1.0 : 0.0;
    }
    map.significant = Tensor3::from_masked(mask, sig);
    return map;
}

PairwiseScannerReport pairwise_scanner_significance(const PosteriorStore& store, double alpha_level,
                                                    bool bonferroni) {
    const std::size_t k = store.n_scanners;
    if (k < 2) throw DataError("pairwise significance needs at least two scanners");
    const std::size_t p = store.voxels();
    PairwiseScannerReport rep;
    rep.scanner_names = store.scanner_names;
    rep.alpha_level = alpha_level;
    rep.proportion.assign(p, 0.0);
    std::vector<double> diff(store.draws * p);
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a + 1; b < k; ++b) {
            for (std::size_t n = 0; n < diff.size(); ++n) diff[n] = store.gamma[a][n] - store.gamma[b][n];
            const auto map = joint_credible_band(diff, store.draws, store.mask, alpha_level, bonferroni);
            const auto f = map.flags();
            std::size_t count = 0;
            for (std::size_t v = 0; v < p; ++v) {
                rep.proportion[v] += f[v];
                count += f[v];
            }
            const auto ga = store.mean(store.gamma[a]), gb = store.mean(store.gamma[b]);
            PairMetric m{a, b, std::nullopt, 0.0};
            double ss = 0.0;
            for (std::size_t v = 0; v < p; ++v) ss += (ga[v] - gb[v]) * (ga[v] - gb[v]);
            m.rmse = std::sqrt(ss / static_cast<double>(p));
            rep.pairs.push_back(m);
            rep.significant_voxels.push_back(count);
        }
    for (auto& x : rep.proportion) x /= static_cast<double>(rep.pairs.size());
    return rep;
}

std::map<long, std::optional<double>> roi_aggregate(const Tensor3& image, const Tensor3& labels) {
    if (!(image.dims() == labels.dims())) throw DimsError("label map dims differ from the image");
    std::map<long, std::pair<double, std::size_t>> acc;
    const std::size_t n = image.dims().size();
    for (std::size_t f = 0; f < n; ++f) {
        const long label = std::lround(labels[f]);
        if (label == 0) continue;
        auto& a = acc[label];
        if (image.mask().contains(f) && labels.mask().contains(f)) {
            a.first += image[f];
            ++a.second;
        }
    }
    std::map<long, std::optional<double>> out;
    for (const auto& [label, a] : acc)
        out[label] = a.second ? std::optional<double>(a.first / static_cast<double>(a.second)) : std::nullopt;
    return out;
}

// ---------------------------------------------------------------------------

double lasso_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& beta,
                       double lambda) {
    const double n = static_cast<double>(x.rows());
    return (y - x * beta).squaredNorm() / (2.0 * n) + lambda * beta.lpNorm<1>();
}

LassoResult lasso_cd(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, const LassoOptions& opt,
                     const Eigen::VectorXd* warm) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (x.rows() != y.size()) throw DimsError("design and response sizes differ");
    const double n = static_cast<double>(x.rows());
    const Eigen::Index p = x.cols();
    LassoResult res;
    res.beta = warm ? *warm : Eigen::VectorXd::Zero(p);
    if (res.beta.size() != p) throw DimsError("warm start has the wrong length");
    Eigen::VectorXd r = y - x * res.beta;
    Eigen::VectorXd xsq(p);
    for (Eigen::Index j = 0; j < p; ++j) xsq(j) = x.col(j).squaredNorm() / n;
    for (res.iterations = 0; res.iterations < opt.max_iterations;) {
        ++res.iterations;
        double max_change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (xsq(j) == 0.0) {
                res.beta(j) = 0.0;
                continue;
            }
            const double rho = x.col(j).dot(r) / n + xsq(j) * res.beta(j);
            const double shrunk = rho > lambda ? rho - lambda : (rho < -lambda ? rho + lambda : 0.0);
            const double updated = shrunk / xsq(j);
            const double delta = updated - res.beta(j);
            if (delta != 0.0) {
                r.noalias() -= delta * x.col(j);
                res.beta(j) = updated;
                max_change = std::max(max_change, std::abs(delta));
            }
        }
        res.objective_trace.push_back(r.squaredNorm() / (2.0 * n) + lambda * res.beta.lpNorm<1>());
        if (max_change < opt.tolerance) {
            res.converged = true;
            break;
        }
    }
    res.objective = lasso_objective(x, y, res.beta, lambda);
    return res;
}

std::vector<std::size_t> stratified_folds(const StudyDataset& data, std::size_t folds, RngStream& rng) {
    if (folds < 2) throw ConfigError("need at least two folds");
    const std::size_t k = data.n_scanners();
    std::vector<std::vector<std::size_t>> subjects(k);
    for (std::size_t s = 0; s < data.n_subjects(); ++s) subjects[data.scanner_of_subjects()[s]].push_back(s);
    std::vector<std::size_t> fold_of_subject(data.n_subjects());
    std::size_t offset = 0;
    for (auto& list : subjects) {
        for (std::size_t i = list.size(); i > 1; --i) {
            const auto pick = std::min(i - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(i)));
            std::swap(list[i - 1], list[pick]);
        }
        for (std::size_t i = 0; i < list.size(); ++i) fold_of_subject[list[i]] = (offset + i) % folds;
        offset += list.size();
    }
    std::vector<std::size_t> out(data.n_images());
    for (std::size_t i = 0; i < data.n_images(); ++i) out[i] = fold_of_subject[data.subject_of(i)];
    return out;
}

namespace {

struct Standardizer {
    Eigen::RowVectorXd mean, scale;  // scale = 1/sd, 0 for constant columns
    double y_mean = 0.0;

    static Standardizer fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
        Standardizer s;
        s.mean = x.colwise().mean();
        s.scale.resize(x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            const double var = (x.col(c).array() - s.mean(c)).square().mean();
            s.scale(c) = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
        }
        s.y_mean = y.mean();
        return s;
    }
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
        return ((x.rowwise() - mean).array().rowwise() * scale.array()).matrix();
    }
};

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(idx[r]);
    return out;
}

Eigen::VectorXd entries_of(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) out(static_cast<Eigen::Index>(r)) = v(idx[r]);
    return out;
}

void split_indices(const std::vector<std::size_t>& fold_of, std::size_t f, std::vector<Eigen::Index>& train,
                   std::vector<Eigen::Index>& test) {
    train.clear();
    test.clear();
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        (fold_of[i] == f ? test : train).push_back(static_cast<Eigen::Index>(i));
}

}  // namespace

CvResult kfold_cv_predict(const StudyDataset& data, const Eigen::VectorXd& target, const CvOptions& opt) {
    const auto n = static_cast<Eigen::Index>(data.n_images());
    if (target.size() != n) throw DataError("target length differs from the image count");
    if (opt.path_length < 1 || !(opt.path_ratio > 0.0 && opt.path_ratio <= 1.0))
        throw ConfigError("invalid lambda path");
    const Eigen::MatrixXd x = image_matrix(data);

    // Geometric lambda path from the full-data bound.
    const auto full = Standardizer::fit(x, target);
    const Eigen::MatrixXd xs = full.apply(x);
    const double lmax =
        (xs.transpose() * (target.array() - full.y_mean).matrix()).cwiseAbs().maxCoeff() / static_cast<double>(n);
    std::vector<double> path(opt.path_length);
    for (std::size_t l = 0; l < path.size(); ++l)
        path[l] = lmax * std::pow(opt.path_ratio, path.size() == 1 ? 0.0
                                                                    : static_cast<double>(l) /
                                                                          static_cast<double>(path.size() - 1));

    CvResult res;
    RngStream inner_rng(opt.seed, 1);
    const auto inner = stratified_folds(data, opt.inner_folds, inner_rng);
    std::vector<double> err(path.size(), 0.0);
    std::vector<Eigen::Index> train, test;
    for (std::size_t f = 0; f < opt.inner_folds; ++f) {
        split_indices(inner, f, train, test);
        if (test.empty() || train.size() < 2) continue;
        const auto xtr = rows_of(x, train);
        const auto ytr = entries_of(target, train);
        const auto st = Standardizer::fit(xtr, ytr);
        const Eigen::MatrixXd a = st.apply(xtr);
        const Eigen::VectorXd yc = ytr.array() - st.y_mean;
        const Eigen::MatrixXd at = st.apply(rows_of(x, test));
        const auto yte = entries_of(target, test);
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
        for (std::size_t l = 0; l < path.size(); ++l) {
            auto fit = lasso_cd(a, yc, path[l], opt.lasso, &beta);
            if (!fit.converged) ++res.nonconverged;
            beta = fit.beta;
            err[l] += ((at * beta).array() + st.y_mean - yte.array()).square().sum();
        }
    }
    const auto best = static_cast<std::size_t>(std::min_element(err.begin(), err.end()) - err.begin());
    res.lambda = path[best];

    RngStream outer_rng(opt.seed, 0);
    res.fold_of_image = stratified_folds(data, opt.outer_folds, outer_rng);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t f = 0; f < opt.outer_folds; ++f) {
        split_indices(res.fold_of_image, f, train, test);
        if (test.empty()) continue;
        const auto xtr = rows_of(x, train);
        const auto ytr = entries_of(target, train);
        const auto st = Standardizer::fit(xtr, ytr);
        const Eigen::MatrixXd a = st.apply(xtr);
        const Eigen::VectorXd yc = ytr.array() - st.y_mean;
        // Warm-started along the path down to the selected lambda.
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
        for (std::size_t l = 0; l <= best; ++l) {
            auto fit = lasso_cd(a, yc, path[l], opt.lasso, &beta);
            if (!fit.converged && l == best) ++res.nonconverged;
            beta = fit.beta;
        }
        const Eigen::VectorXd pred = (st.apply(rows_of(x, test)) * beta).array() + st.y_mean;
        const double sse = (pred - entries_of(target, test)).squaredNorm();
        res.fold_rmse.push_back(std::sqrt(sse / static_cast<double>(test.size())));
        total += sse;
        count += test.size();
    }
    res.rmse = std::sqrt(total / static_cast<double>(count));
    return res;
}

// ---------------------------------------------------------------------------

double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) throw DimsError("maps differ in size");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] != 0;
        nb += b[i] != 0;
        both += (a[i] != 0) && (b[i] != 0);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice(const Tensor3& a, const Tensor3& b) {
    if (!(a.mask() == b.mask())) throw DimsError("maps have different masks");
    std::vector<std::uint8_t> fa, fb;
    for (auto v : a.mask().voxels()) {
        fa.push_back(a[v] != 0.0);
        fb.push_back(b[v] != 0.0);
    }
    return dice(fa, fb);
}

SplitResult matched_split(const StudyDataset& data, double fraction, RngStream& rng) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
    const std::size_t k = data.n_scanners();
    std::vector<std::vector<std::size_t>> subjects(k);
    for (std::size_t s = 0; s < data.n_subjects(); ++s) subjects[data.scanner_of_subjects()[s]].push_back(s);
    SplitResult res;
    std::vector<std::uint8_t> first(data.n_subjects(), 0);
    std::size_t seen = 0, assigned = 0;
    for (auto& list : subjects) {
        for (std::size_t i = list.size(); i > 1; --i) {
            const auto pick = std::min(i - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(i)));
            std::swap(list[i - 1], list[pick]);
        }
        if (list.size() == 1) ++res.warnings;
        seen += list.size();
        const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(seen)));
        const std::size_t take = std::min(list.size(), target > assigned ? target - assigned : 0);
        for (std::size_t i = 0; i < take; ++i) first[list[i]] = 1;
        assigned += take;
    }
    for (std::size_t i = 0; i < data.n_images(); ++i)
        (first[data.subject_of(i)] ? res.first : res.second).push_back(i);
    if (res.first.empty() || res.second.empty()) throw DataError("split left one side empty");
    return res;
}

DiceReport reproducibility_dice(const PosteriorStore& a, const PosteriorStore& b, const PosteriorStore& full,
                                double alpha_level) {
    if (a.covariate_names != full.covariate_names || b.covariate_names != full.covariate_names)
        throw DataError("split fits use different covariates");
    DiceReport rep;
    rep.covariates = full.covariate_names;
    for (std::size_t s = 0; s < full.theta.size(); ++s) {
        const auto mf = joint_credible_band(full.theta[s], full.draws, full.mask, alpha_level).flags();
        const auto ma = joint_credible_band(a.theta[s], a.draws, a.mask, alpha_level).flags();
        const auto mb = joint_credible_band(b.theta[s], b.draws, b.mask, alpha_level).flags();
        rep.dice_first.push_back(dice(ma, mf));
        rep.dice_second.push_back(dice(mb, mf));
        auto cnt = [](const std::vector<std::uint8_t>& f) {
            return static_cast<std::size_t>(std::count(f.begin(), f.end(), 1));
        };
        rep.count_full.push_back(cnt(mf));
        rep.count_first.push_back(cnt(ma));
        rep.count_second.push_back(cnt(mb));
    }
    return rep;
}

DiceReport reproducibility_pipeline(const StudyDataset& data, const SamplerConfig& config, double fraction,
                                    double alpha_level, std::uint64_t split_seed) {
    RngStream rng(split_seed, 0);
    const auto split = matched_split(data, fraction, rng);
    SamplerConfig cfg = config;
    cfg.checkpoint_every = 0;
    cfg.stop_after = 0;
    cfg.checkpoint_path.clear();
    const auto fa = fit(data.subset(split.first).pooled(), cfg);
    const auto fb = fit(data.subset(split.second).pooled(), cfg);
    const auto ff = fit(data.pooled(), cfg);
    return reproducibility_dice(fa, fb, ff, alpha_level);
}

// ---------------------------------------------------------------------------

MaskPtr voxel_screen(const std::vector<Tensor3>& images, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("zero-fraction threshold must lie in (0, 1]");
    if (images.empty()) throw DataError("no images to screen");
    const Mask& base = images.front().mask();
    std::vector<std::uint8_t> keep(base.dims().size(), 0);
    const double n = static_cast<double>(images.size());
    for (auto f : base.voxels()) {
        std::size_t zeros = 0;
        double lo = images.front()[f], hi = lo;
        for (const auto& img : images) {
            if (!(img.mask() == base)) throw DimsError("images do not share a mask");
            const double y = img[f];
            zeros += y == 0.0;
            lo = std::min(lo, y);
            hi = std::max(hi, y);
        }
        keep[f] = static_cast<double>(zeros) / n <= threshold && hi > lo;
    }
    auto mask = std::make_shared<const Mask>(base.dims(), std::move(keep));
    if (mask->count() == 0) throw DataError("screening removed every voxel");
    return mask;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DataError("paired samples differ in length");
    if (a.size() < 2) throw DataError("paired t-test needs at least two pairs");
    const double n = static_cast<double>(a.size());
    TTestResult r;
    r.df = n - 1.0;
    for (std::size_t i = 0; i < a.size(); ++i) r.mean_difference += a[i] - b[i];
    r.mean_difference /= n;
    double ss = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i] - r.mean_difference;
        ss += d * d;
    }
    const double se = std::sqrt(ss / (n - 1.0) / n);
    if (!(se > 0.0)) {
        r.t = r.mean_difference == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), r.mean_difference);
        r.p_value = r.mean_difference == 0.0 ? 1.0 : 0.0;
        return r;
    }
    r.t = r.mean_difference / se;
    boost::math::students_t_distribution<double> dist(r.df);
    r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
    return r;
}

std::vector<double> benjamini_hochberg(const std::vector<double>& p) {
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adj(m);
    double running = 1.0;
    for (std::size_t r = m; r > 0; --r) {
        const std::size_t i = order[r - 1];
        running = std::min(running, p[i] * static_cast<double>(m) / static_cast<double>(r));
        adj[i] = std::min(1.0, running);
    }
    return adj;
}

}  // namespace tcombat
