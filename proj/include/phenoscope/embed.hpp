#pragma once

#include "phenoscope/error.hpp"
#include "phenoscope/types.hpp"

#include <Eigen/SVD>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace phenoscope {

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
    Eigen::VectorXd mean;               // D
    RowMatrixXd components;             // C x D, orthonormal rows
    Eigen::VectorXd explained_variance_ratio;  // C, non-increasing
    Eigen::VectorXd explained_variance;        // C, sample variance (N-1 denominator)

    Eigen::Index dim() const { return mean.size(); }
    Eigen::Index n_components() const { return components.rows(); }
};

// Thin SVD of the mean-centred data. Within each component the entry of largest
// magnitude is made positive.
template <typename Derived>
PcaModel fit_pca(const Eigen::MatrixBase<Derived>& X, Eigen::Index n_components) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    if (n < 2) throw Error(Errc::RankError, "PCA needs at least 2 rows, got " + std::to_string(n));
    if (n_components < 1 || n_components > std::min(n - 1, d))
        throw Error(Errc::InvalidArgument, "n_components must be in [1, " + std::to_string(std::min(n - 1, d)) +
                                               "], got " + std::to_string(n_components));

    PcaModel model;
    const RowMatrixXd data = X.template cast<double>();
    model.mean = data.colwise().mean().transpose();
    const RowMatrixXd centred = data.rowwise() - model.mean.transpose();

    Eigen::BDCSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinV);
    const Eigen::VectorXd sq = svd.singularValues().array().square();
    const double total = centred.squaredNorm();

    model.components = svd.matrixV().leftCols(n_components).transpose();
    for (Eigen::Index c = 0; c < n_components; ++c) {
        Eigen::Index arg = 0;
        model.components.row(c).cwiseAbs().maxCoeff(&arg);
        if (model.components(c, arg) < 0) model.components.row(c) *= -1.0;
    }
    model.explained_variance = sq.head(n_components) / static_cast<double>(n - 1);
    model.explained_variance_ratio =
        total > 0 ? Eigen::VectorXd(sq.head(n_components) / total) : Eigen::VectorXd::Zero(n_components);
    return model;
}

template <typename Derived>
RowMatrixXd transform_pca(const PcaModel& model, const Eigen::MatrixBase<Derived>& X) {
    if (X.cols() != model.dim())
        throw Error(Errc::DimMismatch, "matrix has " + std::to_string(X.cols()) + " columns, model expects " +
                                           std::to_string(model.dim()));
    const RowMatrixXd centred = X.template cast<double>().rowwise() - model.mean.transpose();
    return centred * model.components.transpose();
}

template <typename Derived>
RowMatrixXd inverse_transform_pca(const PcaModel& model, const Eigen::MatrixBase<Derived>& Z) {
    if (Z.cols() != model.n_components())
        throw Error(Errc::DimMismatch, "reduced matrix has " + std::to_string(Z.cols()) + " columns, model has " +
                                           std::to_string(model.n_components()) + " components");
    RowMatrixXd out = Z.template cast<double>() * model.components;
    out.rowwise() += model.mean.transpose();
    return out;
}

// Per-column z-scoring; constant columns are centred but left unscaled.
template <typename Derived>
RowMatrixXd zscore_columns(const Eigen::MatrixBase<Derived>& X) {
    RowMatrixXd out = X.template cast<double>();
    if (out.rows() == 0) return out;
    const Eigen::RowVectorXd mean = out.colwise().mean();
    out.rowwise() -= mean;
    const double denom = std::max<double>(1.0, static_cast<double>(out.rows() - 1));
    const Eigen::RowVectorXd sd = (out.colwise().squaredNorm() / denom).cwiseSqrt();
    for (Eigen::Index j = 0; j < out.cols(); ++j)
        if (sd[j] > 0) out.col(j) /= sd[j];
    return out;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansOptions {
    int k = 70;
    std::uint64_t seed = 0;
    int restarts = 10;
    int max_iter = 300;
    double tol = 1e-4;
};

struct ClusterModel {
    int k = 0;
    RowMatrixXd centroids;         // k x C
    std::vector<int> assignments;  // N, in [0, k)
    double inertia = 0.0;          // mean squared distance to assigned centroid
    std::uint64_t seed = 0;
    int iterations = 0;
    // Inertia after each assignment step of the winning restart.
    std::vector<double> inertia_trace;
};

ClusterModel kmeans_fit_impl(const RowMatrixXd& X, const KMeansOptions& opts);

// k-means++ seeding, Lloyd iterations, best of `restarts` by inertia.
template <typename Derived>
ClusterModel kmeans_fit(const Eigen::MatrixBase<Derived>& X, const KMeansOptions& opts) {
    return kmeans_fit_impl(X.template cast<double>(), opts);
}

// Nearest centroid per row; ties go to the lowest index.
std::vector<int> assign_nearest(const RowMatrixXd& X, const RowMatrixXd& centroids);

struct ElbowPoint {
    int k = 0;
    double mean_intra_cluster_variance = 0.0;
    double inertia = 0.0;
};

std::vector<ElbowPoint> elbow_scan_impl(const RowMatrixXd& X, const std::vector<int>& k_values,
                                        const KMeansOptions& base);

// `base.k` is ignored; every other option is shared across the scan.
template <typename Derived>
std::vector<ElbowPoint> elbow_scan(const Eigen::MatrixBase<Derived>& X, const std::vector<int>& k_values,
                                   const KMeansOptions& base = {}) {
    return elbow_scan_impl(X.template cast<double>(), k_values, base);
}

// ---------------------------------------------------------------------------
// t-SNE (exact)

struct TsneOptions {
    double perplexity = 30.0;
    std::uint64_t seed = 0;
    int iters = 1000;
    double learning_rate = 200.0;
    double early_exaggeration = 12.0;
    int exaggeration_iters = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    int momentum_switch_iter = 250;
    double min_gain = 0.01;
};

struct TsneLayout {
    RowMatrixXd coords;  // N x 2
    double perplexity = 0.0;
    std::uint64_t seed = 0;
    double kl_final = 0.0;
    // KL(P || Q) at the start of every iteration, evaluated with un-exaggerated P.
    std::vector<double> kl_trace;
};

// Conditional affinities with per-point precision found by bisection so each row's
// entropy is within `tol` nats of log(perplexity); returned symmetrised and normalised.
RowMatrixXd tsne_joint_probabilities(const RowMatrixXd& X, double perplexity, double tol = 1e-4);

// Entropy (nats) of row i of the conditional distribution at precision beta.
double tsne_row_entropy(const RowMatrixXd& X, Eigen::Index i, double beta);

// Per-point precision found by the bisection above.
Eigen::VectorXd tsne_precisions(const RowMatrixXd& X, double perplexity, double tol = 1e-4);

double tsne_kl(const RowMatrixXd& P, const RowMatrixXd& Y);

// Gradient of KL(P || Q) with respect to Y, attractive term multiplied by `exaggeration`.
RowMatrixXd tsne_gradient(const RowMatrixXd& P, const RowMatrixXd& Y, double exaggeration = 1.0);

TsneLayout tsne_impl(const RowMatrixXd& X, const TsneOptions& opts);

template <typename Derived>
TsneLayout tsne(const Eigen::MatrixBase<Derived>& X, const TsneOptions& opts = {}) {
    return tsne_impl(X.template cast<double>(), opts);
}

}  // namespace phenoscope
