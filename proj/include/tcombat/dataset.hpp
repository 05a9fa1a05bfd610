#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tcombat/tensor.hpp"

namespace tcombat {

/// Per-column covariate standardization. Continuous columns are centered and
/// scaled to unit sample sd; binary {0,1} columns are stored unchanged.
struct CovariateTransform {
    std::vector<double> mean;
    std::vector<double> sd;
    std::vector<bool> binary;

    static CovariateTransform fit(const Eigen::MatrixXd& raw);
    Eigen::MatrixXd apply(const Eigen::MatrixXd& raw) const;
};

struct ImageRecord {
    std::string subject;
    int visit = 0;
    double visit_months = 0.0;
};

/// Multi-site imaging study: one image per (subject, visit), each subject tied
/// to exactly one scanner, and a shared analysis mask.
class StudyDataset {
public:
    StudyDataset() = default;

    /// `raw_covariates` has one row per image; it is standardized on entry.
    StudyDataset(MaskPtr mask, std::vector<Tensor3> images, std::vector<ImageRecord> records,
                 std::vector<std::string> scanner_labels_per_image,
                 std::vector<std::string> covariate_names, const Eigen::MatrixXd& raw_covariates);

    const Dims& dims() const { return mask_->dims(); }
    const Mask& mask() const { return *mask_; }
    const MaskPtr& mask_ptr() const { return mask_; }

    std::size_t n_images() const { return images_.size(); }
    std::size_t n_scanners() const { return scanner_names_.size(); }
    std::size_t n_subjects() const { return subject_names_.size(); }
    std::size_t n_covariates() const { return static_cast<std::size_t>(x_.cols()); }

    const Tensor3& image(std::size_t i) const { return images_[i]; }
    const std::vector<Tensor3>& images() const { return images_; }
    const ImageRecord& record(std::size_t i) const { return records_[i]; }
    const std::vector<ImageRecord>& records() const { return records_; }

    /// Scanner index (0-based) of image i.
    std::size_t scanner_of(std::size_t i) const { return scanner_of_image_[i]; }
    const std::vector<std::size_t>& scanner_of_images() const { return scanner_of_image_; }
    std::size_t subject_of(std::size_t i) const { return subject_of_image_[i]; }
    const std::vector<std::size_t>& subject_of_images() const { return subject_of_image_; }
    const std::vector<std::string>& scanner_names() const { return scanner_names_; }
    const std::vector<std::string>& subject_names() const { return subject_names_; }
    /// Scanner index of each subject.
    const std::vector<std::size_t>& scanner_of_subjects() const { return scanner_of_subject_; }
    /// Number of images acquired on each scanner.
    std::vector<std::size_t> images_per_scanner() const;

    /// Standardized covariates, one row per image.
    const Eigen::MatrixXd& covariates() const { return x_; }
    const Eigen::MatrixXd& raw_covariates() const { return raw_x_; }
    const std::vector<std::string>& covariate_names() const { return covariate_names_; }
    const CovariateTransform& transform() const { return transform_; }

    /// Same design with different image values (e.g. harmonized output).
    StudyDataset with_images(std::vector<Tensor3> images) const;
    /// Same images and covariates with every image assigned to one scanner.
    StudyDataset pooled() const;
    /// Subset of images (order preserved).
    StudyDataset subset(const std::vector<std::size_t>& image_indices) const;
    /// Images restricted to one 2D slice along `axis` (0-based) at `index`.
    StudyDataset slice(std::size_t axis, std::size_t index) const;
    /// Covariates plus visit_months (and optionally visit_months x covariate
    /// interactions) as extra raw columns, re-standardized.
    StudyDataset with_time_covariates(bool interactions) const;

private:
    MaskPtr mask_;
    std::vector<Tensor3> images_;
    std::vector<ImageRecord> records_;
    std::vector<std::string> scanner_label_per_image_;
    std::vector<std::size_t> scanner_of_image_;
    std::vector<std::size_t> subject_of_image_;
    std::vector<std::string> scanner_names_;
    std::vector<std::string> subject_names_;
    std::vector<std::size_t> scanner_of_subject_;
    std::vector<std::string> covariate_names_;
    Eigen::MatrixXd raw_x_;
    Eigen::MatrixXd x_;
    CovariateTransform transform_;
};

/// Extracts a 2D slice of a volume tensor (as a p x q x 1 tensor) using `mask`.
Tensor3 extract_slice(const Tensor3& volume, std::size_t axis, std::size_t index, MaskPtr mask);
MaskPtr slice_mask(const Mask& mask, std::size_t axis, std::size_t index);
/// Flat volume index of in-slice position (a, b).
std::size_t slice_to_volume(const Dims& dims, std::size_t axis, std::size_t index, std::size_t a,
                            std::size_t b);

}  // namespace tcombat
