#include "tcombat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tcombat/errors.hpp"

namespace tcombat {

Dims::Dims(std::size_t p1, std::size_t p2, std::size_t p3) : extent{p1, p2, p3} {
    if (p1 == 0 || p2 == 0 || p3 == 0) throw DimsError("tensor extents must be positive");
}

std::array<std::size_t, 3> Dims::coords(std::size_t flat_index) const {
    const std::size_t k = flat_index % extent[2];
    const std::size_t rest = flat_index / extent[2];
    return {rest / extent[1], rest % extent[1], k};
}

Mask::Mask(Dims dims) : dims_(dims), included_(dims.size(), 1) { index(); }

Mask::Mask(Dims dims, std::vector<std::uint8_t> included)
    : dims_(dims), included_(std::move(included)) {
    if (included_.size() != dims_.size()) throw DimsError("mask length does not match dims");
    for (auto& b : included_) b = b ? 1 : 0;
    index();
}

void Mask::index() {
    voxels_.clear();
    compact_.assign(included_.size(), npos);
    for (std::size_t v = 0; v < included_.size(); ++v) {
        if (included_[v]) {
            compact_[v] = voxels_.size();
            voxels_.push_back(v);
        }
    }
}

MaskPtr full_mask(Dims dims) { return std::make_shared<const Mask>(dims); }

Tensor3::Tensor3(Dims dims) : mask_(full_mask(dims)), values_(dims.size(), 0.0) {}

Tensor3::Tensor3(MaskPtr mask) : mask_(std::move(mask)), values_(mask_->dims().size(), 0.0) {}

Tensor3::Tensor3(MaskPtr mask, std::vector<double> values)
    : mask_(std::move(mask)), values_(std::move(values)) {
    if (values_.size() != mask_->dims().size())
        throw DimsError("tensor value count does not match mask dims");
    for (std::size_t v = 0; v < values_.size(); ++v)
        if (!mask_->contains(v)) values_[v] = 0.0;
}

void Tensor3::set(std::size_t i, std::size_t j, std::size_t k, double value) {
    set_flat(dims().flat(i, j, k), value);
}

void Tensor3::set_flat(std::size_t flat_index, double value) {
    if (flat_index >= values_.size()) throw DimsError("voxel index out of range");
    if (!mask_->contains(flat_index))
        throw DataError("write to masked-out voxel " + std::to_string(flat_index));
    values_[flat_index] = value;
}

std::vector<double> Tensor3::masked_values() const {
    std::vector<double> out;
    out.reserve(mask_->count());
    for (std::size_t v : mask_->voxels()) out.push_back(values_[v]);
    return out;
}

Tensor3 Tensor3::from_masked(MaskPtr mask, std::span<const double> compact) {
    if (compact.size() != mask->count()) throw DimsError("compact length does not match mask");
    Tensor3 t(mask);
    const auto& vox = mask->voxels();
    for (std::size_t c = 0; c < vox.size(); ++c) t.values_[vox[c]] = compact[c];
    return t;
}

double Tensor3::masked_sum() const {
    double s = 0.0;
    for (std::size_t v : mask_->voxels()) s += values_[v];
    return s;
}

ParafacCoefficient::ParafacCoefficient(std::vector<std::size_t> mode_sizes, std::size_t rank)
    : mode_sizes_(std::move(mode_sizes)), rank_(rank) {
    if (rank_ == 0) throw ConfigError("PARAFAC rank must be >= 1");
    if (mode_sizes_.size() < 2 || mode_sizes_.size() > 3)
        throw DimsError("PARAFAC order must be 2 or 3");
    margins_.reserve(rank_ * mode_sizes_.size());
    for (std::size_t r = 0; r < rank_; ++r)
        for (std::size_t p : mode_sizes_) margins_.emplace_back(p, 0.0);
}

void ParafacCoefficient::set_margin(std::size_t r, std::size_t d, std::vector<double> values) {
    if (r >= rank_ || d >= order()) throw DimsError("margin index out of range");
    if (values.size() != mode_sizes_[d]) throw DimsError("margin length does not match mode size");
    margins_[r * order() + d] = std::move(values);
}

std::vector<std::size_t> parafac_modes(const Dims& dims) {
    if (dims.order() == 2) return {dims[0], dims[1]};
    return {dims[0], dims[1], dims[2]};
}

void ParafacCoefficient::add_channel(std::size_t r, double scale, std::span<double> out) const {
    const auto a = margin(r, 0);
    const auto b = margin(r, 1);
    if (order() == 2) {
        const std::size_t p2 = b.size();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double ai = scale * a[i];
            double* row = out.data() + i * p2;
            for (std::size_t j = 0; j < p2; ++j) row[j] += ai * b[j];
        }
        return;
    }
    const auto c = margin(r, 2);
    const std::size_t p2 = b.size(), p3 = c.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ai = scale * a[i];
        for (std::size_t j = 0; j < p2; ++j) {
            const double aij = ai * b[j];
            double* row = out.data() + (i * p2 + j) * p3;
            for (std::size_t k = 0; k < p3; ++k) row[k] += aij * c[k];
        }
    }
}

Tensor3 ParafacCoefficient::reconstruct(const Dims& dims) const {
    // A 3-mode coefficient with a trailing singleton mode also fits a 2D grid.
    const std::vector<std::size_t> literal{dims[0], dims[1], dims[2]};
    if (parafac_modes(dims) != mode_sizes_ && literal != mode_sizes_)
        throw DimsError("PARAFAC margins do not match declared dims");
    std::vector<double> values(dims.size(), 0.0);
    for (std::size_t r = 0; r < rank_; ++r) add_channel(r, 1.0, values);
    return Tensor3(full_mask(dims), std::move(values));
}

Tensor3 parafac_reconstruct(const ParafacCoefficient& coef, const Dims& dims) {
    for (std::size_t r = 0; r < coef.rank(); ++r)
        for (std::size_t d = 0; d < coef.order(); ++d)
            for (double x : coef.margin(r, d))
                if (!std::isfinite(x)) throw DataError("non-finite PARAFAC margin");
    return coef.reconstruct(dims);
}

std::vector<double> partial_outer(const ParafacCoefficient& coef, std::size_t r, std::size_t d) {
    if (r >= coef.rank() || d >= coef.order()) throw DimsError("partial_outer index out of range");
    std::vector<double> out{1.0};
    for (std::size_t m = 0; m < coef.order(); ++m) {
        if (m == d) continue;
        const auto marg = coef.margin(r, m);
        std::vector<double> next;
        next.reserve(out.size() * marg.size());
        for (double o : out)
            for (double x : marg) next.push_back(o * x);
        out = std::move(next);
    }
    return out;
}

Eigen::MatrixXd matricize(const Tensor3& tensor, std::size_t mode) {
    const Dims& dims = tensor.dims();
    if (mode >= 3) throw DimsError("matricize mode out of range");
    const std::size_t rows = dims[mode];
    Eigen::MatrixXd out(rows, dims.size() / rows);
    std::array<std::size_t, 2> others{};
    for (std::size_t m = 0, o = 0; m < 3; ++m)
        if (m != mode) others[o++] = m;
    for (std::size_t v = 0; v < dims.size(); ++v) {
        const auto c = dims.coords(v);
        const std::size_t col = c[others[0]] * dims[others[1]] + c[others[1]];
        out(c[mode], col) = tensor[v];
    }
    return out;
}

Tensor3 dematricize(const Eigen::MatrixXd& unfolded, std::size_t mode, const Dims& dims) {
    if (mode >= 3 || static_cast<std::size_t>(unfolded.rows()) != dims[mode] ||
        static_cast<std::size_t>(unfolded.size()) != dims.size())
        throw DimsError("dematricize shape mismatch");
    std::array<std::size_t, 2> others{};
    for (std::size_t m = 0, o = 0; m < 3; ++m)
        if (m != mode) others[o++] = m;
    std::vector<double> values(dims.size());
    for (std::size_t v = 0; v < dims.size(); ++v) {
        const auto c = dims.coords(v);
        values[v] = unfolded(c[mode], c[others[0]] * dims[others[1]] + c[others[1]]);
    }
    return Tensor3(full_mask(dims), std::move(values));
}

double one_minus_rho_sq(double alpha) { return -std::expm1(-2.0 * alpha); }

Eigen::MatrixXd ar1_matrix(double alpha, std::size_t p) {
    if (!(alpha > 0.0)) throw ConfigError("AR-1 lengthscale must be positive");
    if (p == 0 || p > 256) throw ConfigError("dense AR-1 matrices are limited to 1 <= p <= 256");
    Eigen::MatrixXd m(p, p);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
            m(i, j) = std::exp(-alpha * std::abs(static_cast<double>(i) - static_cast<double>(j)));
    return m;
}

double Ar1Covariance::quadform(std::span<const double> x) const {
    return ar1_quadform(x, alpha, w, tau);
}

double Ar1Covariance::log_det_correlation() const {
    return static_cast<double>(p - 1) * std::log(one_minus_rho_sq(alpha));
}

double ar1_quadform(std::span<const double> x, double alpha, double w, double tau) {
    if (!(alpha > 0.0) || !(w > 0.0) || !(tau > 0.0))
        throw ConfigError("AR-1 parameters must be positive");
    for (double v : x)
        if (!std::isfinite(v)) throw DataError("non-finite input to AR-1 quadratic form");
    const std::size_t p = x.size();
    if (p == 0) return 0.0;
    if (p == 1) return x[0] * x[0] / (w * tau);
    const double rho = std::exp(-alpha);
    double ends = x[0] * x[0] + x[p - 1] * x[p - 1];
    double interior = 0.0, cross = 0.0;
    for (std::size_t k = 1; k + 1 < p; ++k) interior += x[k] * x[k];
    for (std::size_t k = 0; k + 1 < p; ++k) cross += x[k] * x[k + 1];
    const double q = ends + (1.0 + rho * rho) * interior - 2.0 * rho * cross;
    return std::max(q, 0.0) / (w * tau * one_minus_rho_sq(alpha));
}

}  // namespace tcombat
