#include "tcombat/report.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tcombat/errors.hpp"
#include "tcombat/linalg.hpp"

using nlohmann::json;

namespace tcombat {

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json number_or_null(const std::optional<double>& v) { return v ? number_or_null(*v) : json(nullptr); }

std::vector<double> compact(const Tensor3& t, const Mask& mask) {
    std::vector<double> out;
    out.reserve(mask.count());
    for (auto f : mask.voxels()) out.push_back(t[f]);
    return out;
}

std::string csv_cell(const json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return v.get<std::string>();
    std::ostringstream s;
    s.precision(10);
    if (v.is_number_float()) s << v.get<double>();
    else s << v.dump();
    return s.str();
}

const json* series_of(const json& report, const std::string& name) {
    const auto it = report.find("series");
    if (it == report.end()) return nullptr;
    const auto s = it->find(name);
    return s == it->end() ? nullptr : &*s;
}

bool numeric_series(const json& s, std::vector<double>& out) {
    out.clear();
    for (const auto& v : s) {
        if (!v.is_number()) return false;
        out.push_back(v.get<double>());
    }
    return true;
}

}  // namespace

BlockDetection block_detection(const std::vector<double>& proportion, const Mask& mask, const Tensor3& block) {
    if (proportion.size() != mask.count()) throw DimsError("proportion map does not match the mask");
    if (!(block.dims() == mask.dims())) throw DimsError("block map dims differ from the mask");
    double in = 0.0, out = 0.0;
    std::size_t n_in = 0, n_out = 0;
    const auto& vox = mask.voxels();
    for (std::size_t v = 0; v < vox.size(); ++v) {
        if (block[vox[v]] != 0.0) {
            in += proportion[v];
            ++n_in;
        } else {
            out += proportion[v];
            ++n_out;
        }
    }
    BlockDetection d;
    d.sensitivity = n_in ? in / static_cast<double>(n_in) : 0.0;
    d.false_positive_rate = n_out ? out / static_cast<double>(n_out) : 0.0;
    return d;
}

json evaluate_dataset(const StudyDataset& data, const std::string& label, const EvaluationOptions& opt,
                      const PosteriorStore* store, const GroundTruth* truth) {
    json r;
    r["label"] = label;
    r["n_images"] = data.n_images();
    r["n_scanners"] = data.n_scanners();
    r["n_voxels"] = data.mask().count();
    r["alpha_level"] = opt.alpha_level;
    json series = json::object();

    if (data.n_scanners() >= 2) {
        const auto pw = scanner_pairwise_metrics(data);
        json pairs = json::array();
        json rmse = json::array(), corr = json::array();
        for (const auto& p : pw.pairs) {
            pairs.push_back({{"first", data.scanner_names()[p.first]},
                             {"second", data.scanner_names()[p.second]},
                             {"rmse", p.rmse},
                             {"correlation", number_or_null(p.correlation)}});
            rmse.push_back(p.rmse);
            corr.push_back(number_or_null(p.correlation));
        }
        r["pairwise"] = pairs;
        r["mean_pairwise_rmse"] = pw.mean_rmse();
        r["mean_pairwise_correlation"] = number_or_null(pw.mean_correlation());
        series["pairwise_rmse"] = rmse;
        series["pairwise_correlation"] = corr;

        const auto residuals = covariate_residuals(data);
        const auto anova = anova_per_voxel(residuals, data.scanner_of_images());
        r["anova_fraction"] = anova.fraction_below(opt.alpha_level);
        const auto counts = data.images_per_scanner();
        if (std::all_of(counts.begin(), counts.end(), [](std::size_t c) { return c >= 2; })) {
            const auto bart = bartlett_per_voxel(residuals, data.scanner_of_images());
            r["bartlett_fraction"] = bart.fraction_below(opt.alpha_level);
        }
    }

    if (opt.cross_validate && data.n_covariates() > 0) {
        const auto& names = data.covariate_names();
        const std::string target = opt.target.empty() ? names.front() : opt.target;
        const auto it = std::find(names.begin(), names.end(), target);
        if (it == names.end()) throw ConfigError("unknown prediction target: " + target);
        const Eigen::VectorXd y = data.raw_covariates().col(it - names.begin());
        const auto cv = kfold_cv_predict(data, y, opt.cv);
        r["cv"] = {{"target", target},
                   {"rmse", cv.rmse},
                   {"lambda", cv.lambda},
                   {"fold_rmse", cv.fold_rmse},
                   {"nonconverged", cv.nonconverged}};
        series["cv_fold_rmse"] = cv.fold_rmse;
    }

    if (store && store->n_scanners >= 2 && store->draws > 0) {
        const auto sig = pairwise_scanner_significance(*store, opt.alpha_level, opt.bonferroni);
        double mean_prop = 0.0;
        for (double p : sig.proportion) mean_prop += p;
        mean_prop /= static_cast<double>(std::max<std::size_t>(sig.proportion.size(), 1));
        r["significance"] = {{"bonferroni", opt.bonferroni},
                             {"significant_voxels", sig.significant_voxels},
                             {"mean_proportion", mean_prop}};
        if (truth && truth->block.size()) {
            const auto d = block_detection(sig.proportion, *store->mask, truth->block);
            r["significance"]["block_sensitivity"] = d.sensitivity;
            r["significance"]["block_false_positive_rate"] = d.false_positive_rate;
        }
    }

    if (store && truth && store->draws > 0) {
        const Mask& mask = *store->mask;
        json rec;
        json g = json::array();
        for (std::size_t j = 0; j < std::min(store->gamma.size(), truth->gamma.size()); ++j)
            g.push_back(number_or_null(pearson(store->mean(store->gamma[j]), compact(truth->gamma[j], mask))));
        rec["gamma_correlation"] = g;
        json t = json::array();
        for (std::size_t s = 0; s < std::min(store->theta.size(), truth->theta.size()); ++s)
            t.push_back(number_or_null(pearson(store->mean(store->theta[s]), compact(truth->theta[s], mask))));
        rec["theta_correlation"] = t;
        r["recovery"] = rec;
    }

    r["series"] = series;
    return r;
}

json compare_reports(const std::vector<json>& reports) {
    if (reports.size() < 2) throw ConfigError("compare needs at least two reports");
    const json& base = reports.front();
    json rows = json::array();
    std::vector<double> p;
    std::vector<double> a, b;
    for (std::size_t i = 1; i < reports.size(); ++i)
        for (const char* metric : {"pairwise_rmse", "pairwise_correlation", "cv_fold_rmse"}) {
            const json* sa = series_of(base, metric);
            const json* sb = series_of(reports[i], metric);
            if (!sa || !sb || !numeric_series(*sa, a) || !numeric_series(*sb, b)) continue;
            if (a.size() != b.size() || a.size() < 2) continue;
            const auto t = paired_t_test(b, a);
            double ma = 0.0, mb = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                ma += a[k];
                mb += b[k];
            }
            ma /= static_cast<double>(a.size());
            mb /= static_cast<double>(b.size());
            rows.push_back({{"metric", metric},
                            {"baseline", base.value("label", "report0")},
                            {"label", reports[i].value("label", "report" + std::to_string(i))},
                            {"n", a.size()},
                            {"mean_baseline", ma},
                            {"mean_other", mb},
                            {"mean_difference", t.mean_difference},
                            {"t", number_or_null(t.t)},
                            {"df", t.df},
                            {"p_value", t.p_value}});
            p.push_back(t.p_value);
        }
    const auto adj = benjamini_hochberg(p);
    for (std::size_t k = 0; k < rows.size(); ++k) rows[k]["p_adjusted"] = adj[k];

    json summary = json::array();
    for (const auto& r : reports) {
        json s;
        s["label"] = r.value("label", "");
        for (const char* key : {"mean_pairwise_rmse", "mean_pairwise_correlation", "anova_fraction", "bartlett_fraction"})
            s[key] = r.contains(key) ? r[key] : json(nullptr);
        s["cv_rmse"] = r.contains("cv") ? r["cv"]["rmse"] : json(nullptr);
        summary.push_back(s);
    }
    return {{"summary", summary}, {"comparisons", rows}};
}

std::string reports_csv(const std::vector<json>& reports) {
    std::ostringstream out;
    out << "label,n_images,n_scanners,n_voxels,mean_pairwise_rmse,mean_pairwise_correlation,anova_fraction,"
           "bartlett_fraction,cv_rmse,cv_lambda\n";
    for (const auto& r : reports) {
        auto get = [&](const char* key) { return r.contains(key) ? csv_cell(r[key]) : std::string(); };
        out << get("label") << ',' << get("n_images") << ',' << get("n_scanners") << ',' << get("n_voxels") << ','
            << get("mean_pairwise_rmse") << ',' << get("mean_pairwise_correlation") << ',' << get("anova_fraction")
            << ',' << get("bartlett_fraction") << ',' << (r.contains("cv") ? csv_cell(r["cv"]["rmse"]) : "") << ','
            << (r.contains("cv") ? csv_cell(r["cv"]["lambda"]) : "") << '\n';
    }
    return out.str();
}

std::string comparison_csv(const json& comparison) {
    std::ostringstream out;
    const char* cols[] = {"metric", "baseline", "label", "n", "mean_baseline", "mean_other",
                          "mean_difference", "t", "df", "p_value", "p_adjusted"};
    for (std::size_t c = 0; c < std::size(cols); ++c) out << (c ? "," : "") << cols[c];
    out << '\n';
    for (const auto& row : comparison.at("comparisons")) {
        for (std::size_t c = 0; c < std::size(cols); ++c) out << (c ? "," : "") << csv_cell(row.at(cols[c]));
        out << '\n';
    }
    return out.str();
}

}  // namespace tcombat
