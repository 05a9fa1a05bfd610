#pragma once

#include <vector>

#include <Eigen/Dense>

#include "tcombat/dataset.hpp"

namespace tcombat {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Images as an N x P matrix over the compact (masked) voxels.
RowMatrix image_matrix(const StudyDataset& data);
RowMatrix image_matrix(const std::vector<Tensor3>& images);
std::vector<Tensor3> images_from_matrix(const MaskPtr& mask, const RowMatrix& values);

/// Least squares of every column of Y on a shared design X.
struct OlsFit {
    Eigen::MatrixXd coef;       // columns(X) x columns(Y)
    Eigen::MatrixXd residuals;  // rows(X) x columns(Y)
    Eigen::Index rank = 0;
    bool full_rank() const { return rank == coef.rows(); }
};

OlsFit ols(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Scanner coding with K - 1 columns whose implied effects satisfy
/// sum_j n_j gamma_j = 0. `to_effects` maps the K - 1 coefficients to all K effects.
struct SumToZeroCoding {
    Eigen::MatrixXd columns;     // N x (K - 1)
    Eigen::MatrixXd to_effects;  // K x (K - 1)
};

SumToZeroCoding sum_to_zero_coding(const std::vector<std::size_t>& scanner_of, std::size_t scanners);

/// Residual images after voxelwise OLS on an intercept plus the standardized covariates.
std::vector<Tensor3> covariate_residuals(const StudyDataset& data);

}  // namespace tcombat
