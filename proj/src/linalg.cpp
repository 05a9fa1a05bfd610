#include "tcombat/linalg.hpp"

#include "tcombat/errors.hpp"

namespace tcombat {

RowMatrix image_matrix(const std::vector<Tensor3>& images) {
    if (images.empty()) return {};
    const auto& vox = images.front().mask().voxels();
    RowMatrix m(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(vox.size()));
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::size_t v = 0; v < vox.size(); ++v)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)) = images[i][vox[v]];
    return m;
}

RowMatrix image_matrix(const StudyDataset& data) { return image_matrix(data.images()); }

std::vector<Tensor3> images_from_matrix(const MaskPtr& mask, const RowMatrix& values) {
    if (static_cast<std::size_t>(values.cols()) != mask->count())
        throw DimsError("matrix columns do not match the mask");
    std::vector<Tensor3> out;
    out.reserve(static_cast<std::size_t>(values.rows()));
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        std::vector<double> row(values.row(i).begin(), values.row(i).end());
        out.push_back(Tensor3::from_masked(mask, row));
    }
    return out;
}

OlsFit ols(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.rows() != y.rows()) throw DimsError("design and response row counts differ");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    OlsFit f;
    f.rank = qr.rank();
    f.coef = qr.solve(y);
    f.residuals = y - x * f.coef;
    return f;
}

SumToZeroCoding sum_to_zero_coding(const std::vector<std::size_t>& scanner_of, std::size_t k) {
    if (k < 2) throw DataError("sum-to-zero coding needs at least two scanners");
    std::vector<double> n(k, 0.0);
    for (auto j : scanner_of) {
        if (j >= k) throw DataError("scanner index out of range");
        n[j] += 1.0;
    }
    for (double c : n)
        if (c == 0.0) throw DataError("scanner without images");
    SumToZeroCoding c;
    const auto rows = static_cast<Eigen::Index>(scanner_of.size());
    const auto cols = static_cast<Eigen::Index>(k - 1);
    c.columns = Eigen::MatrixXd::Zero(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const std::size_t j = scanner_of[static_cast<std::size_t>(i)];
        if (j + 1 < k) {
            c.columns(i, static_cast<Eigen::Index>(j)) = 1.0;
        } else {
            for (std::size_t l = 0; l + 1 < k; ++l) c.columns(i, static_cast<Eigen::Index>(l)) = -n[l] / n[k - 1];
        }
    }
    c.to_effects = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), cols);
    for (std::size_t l = 0; l + 1 < k; ++l) {
        c.to_effects(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(l)) = 1.0;
        c.to_effects(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(l)) = -n[l] / n[k - 1];
    }
    return c;
}

std::vector<Tensor3> covariate_residuals(const StudyDataset& data) {
    const auto n = static_cast<Eigen::Index>(data.n_images());
    const auto q = static_cast<Eigen::Index>(data.n_covariates());
    Eigen::MatrixXd x(n, 1 + q);
    x.col(0).setOnes();
    if (q > 0) x.rightCols(q) = data.covariates();
    const auto fit = ols(x, image_matrix(data));
    return images_from_matrix(data.mask_ptr(), fit.residuals);
}

}  // namespace tcombat
