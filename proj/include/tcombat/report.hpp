#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcombat/btrr.hpp"
#include "tcombat/dataset.hpp"
#include "tcombat/evaluation.hpp"
#include "tcombat/simulator.hpp"

namespace tcombat {

struct EvaluationOptions {
    double alpha_level = 0.05;
    bool bonferroni = false;
    /// Covariate predicted in cross-validation; the first covariate when empty.
    std::string target;
    bool cross_validate = true;
    CvOptions cv;
};

/// Sensitivity (mean flagged fraction inside `block`) and false-positive rate
/// (outside) of a per-voxel proportion map.
struct BlockDetection {
    double sensitivity = 0.0;
    double false_positive_rate = 0.0;
};

BlockDetection block_detection(const std::vector<double>& proportion, const Mask& mask, const Tensor3& block);

/// Per-method report: pairwise scanner metrics, ANOVA/Bartlett proportions on
/// covariate residuals and CV prediction error. With a store, adds the
/// pairwise significance summary; with truth as well, recovery correlations.
nlohmann::json evaluate_dataset(const StudyDataset& data, const std::string& label, const EvaluationOptions& options,
                                const PosteriorStore* store = nullptr, const GroundTruth* truth = nullptr);

/// Paired comparisons of every report against the first, on each per-unit
/// series (pairwise RMSE, pairwise correlation, CV fold RMSE), with
/// Benjamini-Hochberg adjusted p-values over all rows.
nlohmann::json compare_reports(const std::vector<nlohmann::json>& reports);

std::string reports_csv(const std::vector<nlohmann::json>& reports);
std::string comparison_csv(const nlohmann::json& comparison);

}  // namespace tcombat
