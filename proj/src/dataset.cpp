#include "tcombat/dataset.hpp"

#include <cmath>
#include <map>

#include "tcombat/errors.hpp"

namespace tcombat {

CovariateTransform CovariateTransform::fit(const Eigen::MatrixXd& raw) {
    CovariateTransform t;
    const Eigen::Index n = raw.rows();
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
        const auto col = raw.col(c);
        bool binary = true;
        for (Eigen::Index i = 0; i < n; ++i)
            if (col(i) != 0.0 && col(i) != 1.0) binary = false;
        if (!col.allFinite()) throw DataError("non-finite covariate value");
        t.binary.push_back(binary);
        if (binary) {
            t.mean.push_back(0.0);
            t.sd.push_back(1.0);
            continue;
        }
        const double mean = col.mean();
        double ss = (col.array() - mean).square().sum();
        double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
        if (!(sd > 0.0)) sd = 1.0;  // constant column: centered only
        t.mean.push_back(mean);
        t.sd.push_back(sd);
    }
    return t;
}

Eigen::MatrixXd CovariateTransform::apply(const Eigen::MatrixXd& raw) const {
    Eigen::MatrixXd out = raw;
    for (Eigen::Index c = 0; c < raw.cols(); ++c)
        out.col(c) = (raw.col(c).array() - mean[c]) / sd[c];
    return out;
}

StudyDataset::StudyDataset(MaskPtr mask, std::vector<Tensor3> images,
                           std::vector<ImageRecord> records,
                           std::vector<std::string> scanner_labels_per_image,
                           std::vector<std::string> covariate_names,
                           const Eigen::MatrixXd& raw_covariates)
    : mask_(std::move(mask)),
      images_(std::move(images)),
      records_(std::move(records)),
      scanner_label_per_image_(std::move(scanner_labels_per_image)),
      covariate_names_(std::move(covariate_names)),
      raw_x_(raw_covariates) {
    const std::size_t n = images_.size();
    if (n == 0) throw DataError("dataset has no images");
    if (records_.size() != n || scanner_label_per_image_.size() != n)
        throw DataError("image, record and scanner counts differ");
    if (static_cast<std::size_t>(raw_x_.rows()) != n && !(raw_x_.cols() == 0))
        throw DataError("covariate rows do not match image count");
    if (raw_x_.cols() == 0) raw_x_.resize(static_cast<Eigen::Index>(n), 0);
    if (covariate_names_.size() != static_cast<std::size_t>(raw_x_.cols()))
        throw DataError("covariate name count does not match columns");
    for (auto& img : images_) {
        if (!(img.dims() == mask_->dims())) throw DimsError("image dims differ from mask dims");
        // Re-bind every image to the shared mask.
        img = Tensor3(mask_, std::vector<double>(img.values().begin(), img.values().end()));
    }

    std::map<std::string, std::size_t> scanner_index, subject_index;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& label = scanner_label_per_image_[i];
        auto [it, inserted] = scanner_index.try_emplace(label, scanner_names_.size());
        if (inserted) scanner_names_.push_back(label);
        scanner_of_image_.push_back(it->second);

        auto [sit, sinserted] = subject_index.try_emplace(records_[i].subject, subject_names_.size());
        if (sinserted) {
            subject_names_.push_back(records_[i].subject);
            scanner_of_subject_.push_back(it->second);
        } else if (scanner_of_subject_[sit->second] != it->second) {
            throw DataError("subject " + records_[i].subject + " appears on more than one scanner");
        }
        subject_of_image_.push_back(sit->second);
    }
    transform_ = CovariateTransform::fit(raw_x_);
    x_ = transform_.apply(raw_x_);
}

std::vector<std::size_t> StudyDataset::images_per_scanner() const {
    std::vector<std::size_t> counts(n_scanners(), 0);
    for (std::size_t j : scanner_of_image_) ++counts[j];
    return counts;
}

StudyDataset StudyDataset::with_images(std::vector<Tensor3> images) const {
    if (images.size() != images_.size()) throw DataError("replacement image count differs");
    StudyDataset out = *this;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!(images[i].dims() == dims())) throw DimsError("replacement image dims differ");
        out.images_[i] =
            Tensor3(mask_, std::vector<double>(images[i].values().begin(), images[i].values().end()));
    }
    return out;
}

StudyDataset StudyDataset::pooled() const {
    std::vector<std::string> labels(images_.size(), "pooled");
    return StudyDataset(mask_, images_, records_, labels, covariate_names_, raw_x_);
}

StudyDataset StudyDataset::subset(const std::vector<std::size_t>& idx) const {
    std::vector<Tensor3> imgs;
    std::vector<ImageRecord> recs;
    std::vector<std::string> labels;
    Eigen::MatrixXd raw(static_cast<Eigen::Index>(idx.size()), raw_x_.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::size_t i = idx[r];
        if (i >= images_.size()) throw DataError("subset index out of range");
        imgs.push_back(images_[i]);
        recs.push_back(records_[i]);
        labels.push_back(scanner_label_per_image_[i]);
        raw.row(static_cast<Eigen::Index>(r)) = raw_x_.row(static_cast<Eigen::Index>(i));
    }
    return StudyDataset(mask_, std::move(imgs), std::move(recs), std::move(labels), covariate_names_,
                        raw);
}

namespace {

std::array<std::size_t, 2> in_plane_axes(std::size_t axis) {
    switch (axis) {
        case 0: return {1, 2};
        case 1: return {0, 2};
        case 2: return {0, 1};
        default: throw ConfigError("slice axis must be 1, 2 or 3");
    }
}

}  // namespace

std::size_t slice_to_volume(const Dims& dims, std::size_t axis, std::size_t index, std::size_t a,
                            std::size_t b) {
    const auto ax = in_plane_axes(axis);
    std::array<std::size_t, 3> c{};
    c[axis] = index;
    c[ax[0]] = a;
    c[ax[1]] = b;
    return dims.flat(c[0], c[1], c[2]);
}

MaskPtr slice_mask(const Mask& mask, std::size_t axis, std::size_t index) {
    const Dims& vd = mask.dims();
    if (index >= vd[axis]) throw DimsError("slice index out of range");
    const auto ax = in_plane_axes(axis);
    Dims sd(vd[ax[0]], vd[ax[1]], 1);
    std::vector<std::uint8_t> bits(sd.size());
    for (std::size_t a = 0; a < sd[0]; ++a)
        for (std::size_t b = 0; b < sd[1]; ++b)
            bits[sd.flat(a, b, 0)] = mask.contains(slice_to_volume(vd, axis, index, a, b));
    return std::make_shared<const Mask>(sd, std::move(bits));
}

Tensor3 extract_slice(const Tensor3& volume, std::size_t axis, std::size_t index, MaskPtr mask) {
    const Dims& sd = mask->dims();
    std::vector<double> values(sd.size());
    for (std::size_t a = 0; a < sd[0]; ++a)
        for (std::size_t b = 0; b < sd[1]; ++b)
            values[sd.flat(a, b, 0)] = volume[slice_to_volume(volume.dims(), axis, index, a, b)];
    return Tensor3(std::move(mask), std::move(values));
}

StudyDataset StudyDataset::slice(std::size_t axis, std::size_t index) const {
    auto sm = slice_mask(*mask_, axis, index);
    std::vector<Tensor3> imgs;
    imgs.reserve(images_.size());
    for (const auto& img : images_) imgs.push_back(extract_slice(img, axis, index, sm));
    return StudyDataset(sm, std::move(imgs), records_, scanner_label_per_image_, covariate_names_,
                        raw_x_);
}

StudyDataset StudyDataset::with_time_covariates(bool interactions) const {
    const Eigen::Index n = raw_x_.rows();
    const Eigen::Index q = raw_x_.cols();
    const Eigen::Index extra = 1 + (interactions ? q : 0);
    Eigen::MatrixXd raw(n, q + extra);
    raw.leftCols(q) = raw_x_;
    std::vector<std::string> names = covariate_names_;
    names.push_back("visit_months");
    for (Eigen::Index i = 0; i < n; ++i) raw(i, q) = records_[static_cast<std::size_t>(i)].visit_months;
    if (interactions) {
        for (Eigen::Index c = 0; c < q; ++c) {
            names.push_back("visit_months:" + covariate_names_[static_cast<std::size_t>(c)]);
            // Interaction of months with the standardized covariate.
            raw.col(q + 1 + c) = raw.col(q).array() * x_.col(c).array();
        }
    }
    return StudyDataset(mask_, images_, records_, scanner_label_per_image_, std::move(names), raw);
}

}  // namespace tcombat
