#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace tcombat {

/// Extents of a 2D or 3D voxel grid. Storage is row-major with mode 1 slowest,
/// so flat(i, j, k) = (i * p2 + j) * p3 + k. A 2D grid has p3 == 1.
struct Dims {
    std::array<std::size_t, 3> extent{1, 1, 1};

    Dims() = default;
    Dims(std::size_t p1, std::size_t p2, std::size_t p3 = 1);

    std::size_t operator[](std::size_t mode) const { return extent[mode]; }
    std::size_t size() const { return extent[0] * extent[1] * extent[2]; }
    /// Tensor order used by the PARAFAC model: 2 for slices, 3 for volumes.
    std::size_t order() const { return extent[2] == 1 ? 2 : 3; }
    std::size_t flat(std::size_t i, std::size_t j, std::size_t k) const {
        return (i * extent[1] + j) * extent[2] + k;
    }
    std::array<std::size_t, 3> coords(std::size_t flat_index) const;

    bool operator==(const Dims&) const = default;
};

/// Boolean analysis mask. Owned by a dataset and shared read-only by every image.
class Mask {
public:
    Mask() = default;
    explicit Mask(Dims dims);  // all voxels included
    Mask(Dims dims, std::vector<std::uint8_t> included);

    const Dims& dims() const { return dims_; }
    bool contains(std::size_t flat_index) const { return included_[flat_index] != 0; }
    std::size_t count() const { return voxels_.size(); }
    /// Flat indices of included voxels in ascending order.
    const std::vector<std::size_t>& voxels() const { return voxels_; }
    const std::vector<std::uint8_t>& bits() const { return included_; }
    /// Position of a flat index within voxels(), or npos when masked out.
    std::size_t compact_index(std::size_t flat_index) const { return compact_[flat_index]; }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    bool operator==(const Mask& other) const {
        return dims_ == other.dims_ && included_ == other.included_;
    }

private:
    void index();

    Dims dims_;
    std::vector<std::uint8_t> included_;
    std::vector<std::size_t> voxels_;
    std::vector<std::size_t> compact_;
};

using MaskPtr = std::shared_ptr<const Mask>;

MaskPtr full_mask(Dims dims);

/// Dense masked voxel array. Masked-out entries hold 0 and cannot be written.
class Tensor3 {
public:
    Tensor3() = default;
    explicit Tensor3(Dims dims);  // zero-filled, full mask
    Tensor3(MaskPtr mask);
    Tensor3(MaskPtr mask, std::vector<double> values);

    const Dims& dims() const { return mask_->dims(); }
    const Mask& mask() const { return *mask_; }
    const MaskPtr& mask_ptr() const { return mask_; }
    std::size_t size() const { return values_.size(); }

    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return values_[dims().flat(i, j, k)];
    }
    double operator[](std::size_t flat_index) const { return values_[flat_index]; }
    void set(std::size_t i, std::size_t j, std::size_t k, double value);
    void set_flat(std::size_t flat_index, double value);

    std::span<const double> values() const { return values_; }

    /// Values of the included voxels, in Mask::voxels() order.
    std::vector<double> masked_values() const;
    static Tensor3 from_masked(MaskPtr mask, std::span<const double> compact);

    double masked_sum() const;

private:
    MaskPtr mask_;
    std::vector<double> values_;
};

/// Rank-R CP/PARAFAC coefficient: sum over channels of outer products of
/// per-mode margin vectors.
class ParafacCoefficient {
public:
    ParafacCoefficient() = default;
    ParafacCoefficient(std::vector<std::size_t> mode_sizes, std::size_t rank);

    std::size_t rank() const { return rank_; }
    std::size_t order() const { return mode_sizes_.size(); }
    const std::vector<std::size_t>& mode_sizes() const { return mode_sizes_; }

    std::span<double> margin(std::size_t r, std::size_t d) { return margins_[r * order() + d]; }
    std::span<const double> margin(std::size_t r, std::size_t d) const {
        return margins_[r * order() + d];
    }
    void set_margin(std::size_t r, std::size_t d, std::vector<double> values);

    /// Full (unmasked) reconstruction on grid `dims`.
    Tensor3 reconstruct(const Dims& dims) const;
    /// Adds channel r (times `scale`) into a flat row-major buffer of the full grid.
    void add_channel(std::size_t r, double scale, std::span<double> out) const;

    bool operator==(const ParafacCoefficient&) const = default;

private:
    std::vector<std::size_t> mode_sizes_;
    std::size_t rank_ = 0;
    std::vector<std::vector<double>> margins_;
};

/// Mode sizes used by the PARAFAC model for a grid (2 or 3 modes).
std::vector<std::size_t> parafac_modes(const Dims& dims);

Tensor3 parafac_reconstruct(const ParafacCoefficient& coef, const Dims& dims);

/// Outer product of all margins of channel r except mode d, row-major over the
/// remaining modes in increasing mode order.
std::vector<double> partial_outer(const ParafacCoefficient& coef, std::size_t r, std::size_t d);

/// Mode-d matricization: row k holds every entry with index k along mode d,
/// columns ordered row-major over the remaining modes.
Eigen::MatrixXd matricize(const Tensor3& tensor, std::size_t mode);
Tensor3 dematricize(const Eigen::MatrixXd& unfolded, std::size_t mode, const Dims& dims);

/// Covariance tau * w * Lambda(alpha) with Lambda(i, j) = exp(-alpha |i - j|).
struct Ar1Covariance {
    double alpha = 1.0;
    std::size_t p = 1;
    double w = 1.0;
    double tau = 1.0;

    /// x' (tau w Lambda)^{-1} x in O(p) via the tridiagonal precision.
    double quadform(std::span<const double> x) const;
    /// log det Lambda = (p - 1) log(1 - exp(-2 alpha)).
    double log_det_correlation() const;
};

/// Dense AR-1 correlation matrix. Only materialized for p <= 256.
Eigen::MatrixXd ar1_matrix(double alpha, std::size_t p);

/// x' (tau w Lambda(alpha))^{-1} x.
double ar1_quadform(std::span<const double> x, double alpha, double w, double tau = 1.0);

/// 1 - exp(-2 alpha) without cancellation for small alpha.
double one_minus_rho_sq(double alpha);

}  // namespace tcombat
