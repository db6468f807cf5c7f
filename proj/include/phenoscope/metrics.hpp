#pragma once

#include "phenoscope/embed.hpp"
#include "phenoscope/error.hpp"
#include "phenoscope/ingest.hpp"
#include "phenoscope/types.hpp"

#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace phenoscope {

// Mean squared Euclidean distance of the selected rows to their centroid.
// Two passes (centroid, then deviations), accumulated in double.
template <typename Derived>
double variance(const Eigen::MatrixBase<Derived>& X, std::span<const Eigen::Index> rows) {
    if (rows.empty()) throw Error(Errc::EmptySubset, "variance of an empty subset");
    const Eigen::Index d = X.cols();
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (auto r : rows) centroid += X.row(r).template cast<double>().transpose();
    centroid /= static_cast<double>(rows.size());
    double acc = 0.0;
    for (auto r : rows) acc += (X.row(r).template cast<double>().transpose() - centroid).squaredNorm();
    return acc / static_cast<double>(rows.size());
}

template <typename Derived>
double variance(const Eigen::MatrixBase<Derived>& X) {
    std::vector<Eigen::Index> all(static_cast<std::size_t>(X.rows()));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    return variance(X, std::span<const Eigen::Index>(all));
}

struct GroupVariance {
    double mean_intra_group_variance = 0.0;
    double ratio = 0.0;
    int group_count = 0;
};

// Dense group ids in first-appearance order; empty labels map to -1 (unassigned).
std::vector<int> encode_groups(std::span<const std::string> labels);

// Unweighted mean over groups of variance(group), divided by variance(all rows).
// group_of_row[i] == -1 (or a short vector) means row i is unassigned.
template <typename Derived>
GroupVariance group_variance_ratio(const Eigen::MatrixBase<Derived>& X, std::span<const int> group_of_row) {
    if (static_cast<Eigen::Index>(group_of_row.size()) != X.rows())
        throw Error(Errc::UnassignedRow, "grouping covers " + std::to_string(group_of_row.size()) + " of " +
                                             std::to_string(X.rows()) + " rows");
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < group_of_row.size(); ++i) {
        if (group_of_row[i] < 0) throw Error(Errc::UnassignedRow, "row " + std::to_string(i) + " has no group");
        members[group_of_row[i]].push_back(static_cast<Eigen::Index>(i));
    }
    GroupVariance out;
    out.group_count = static_cast<int>(members.size());
    double sum = 0.0;
    for (const auto& [g, rows] : members) sum += variance(X, std::span<const Eigen::Index>(rows));
    out.mean_intra_group_variance = sum / static_cast<double>(members.size());
    const double global = variance(X);
    out.ratio = global > 0.0 ? out.mean_intra_group_variance / global : 0.0;
    return out;
}

struct VarianceReport {
    double global_variance = 0.0;
    std::map<std::string, GroupVariance> per_grouping;
};

// kept_clusters must be a nonempty subset of [0, k); assignments align with records.
double fold_reduction(std::span<const int> assignments, int k, const std::set<int>& kept_clusters,
                      const std::vector<ImageRecord>& records);

inline double fold_reduction(const ClusterModel& model, const std::set<int>& kept_clusters,
                             const std::vector<ImageRecord>& records) {
    return fold_reduction(model.assignments, model.k, kept_clusters, records);
}

struct ExplainedVarianceReport {
    int components_needed = 0;
    std::vector<double> cumulative;
};

ExplainedVarianceReport explained_variance_report(std::span<const double> ratios, double threshold);

inline ExplainedVarianceReport explained_variance_report(const PcaModel& model, double threshold) {
    const auto& r = model.explained_variance_ratio;
    return explained_variance_report(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())),
                                     threshold);
}

// Adjusted Rand Index between two labelings of the same items.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace phenoscope
