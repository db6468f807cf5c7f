#pragma once

#include <Eigen/Dense>

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

namespace phenoscope {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using RowMatrixXf = RowMatrix<float>;
using RowMatrixXd = RowMatrix<double>;

// Identity of one field-of-view image within a screen.
struct RowKey {
    std::string plate_id;
    std::string well_id;
    int field_index = 0;

    auto operator<=>(const RowKey&) const = default;
    bool operator==(const RowKey&) const = default;

    // "plate/well/field", used as the row_id in URLs and error messages.
    std::string str() const { return plate_id + "/" + well_id + "/" + std::to_string(field_index); }
};

// N x D per-image feature vectors with row identity.
struct FeatureMatrix {
    RowMatrixXf values;
    std::vector<RowKey> row_ids;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index dim() const { return values.cols(); }
};

// Throws InvalidArgument/CorruptFile style errors if rows/ids disagree or values are non-finite.
void validate(const FeatureMatrix& m);

}  // namespace phenoscope
