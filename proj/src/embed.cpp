#include "phenoscope/embed.hpp"

#include "phenoscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace phenoscope {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
    return std::mt19937_64(seq);
}

RowMatrixXd kmeans_plus_plus(const RowMatrixXd& X, int k, std::mt19937_64& rng) {
    const Eigen::Index n = X.rows();
    RowMatrixXd centres(k, X.cols());
    std::vector<bool> chosen(static_cast<std::size_t>(n), false);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    Eigen::Index first = pick(rng);
    centres.row(0) = X.row(first);
    chosen[static_cast<std::size_t>(first)] = true;

    Eigen::VectorXd d2 = (X.rowwise() - centres.row(0)).rowwise().squaredNorm();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index next = -1;
        if (total > 0.0) {
            const double target = unit(rng) * total;
            double acc = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2[i];
                if (d2[i] > 0.0 && acc >= target) {
                    next = i;
                    break;
                }
            }
            if (next < 0)  // rounding at the tail
                for (Eigen::Index i = n - 1; i >= 0 && next < 0; --i)
                    if (d2[i] > 0.0) next = i;
        } else {
            // Every remaining point coincides with a centre; take an unused one uniformly.
            std::vector<Eigen::Index> unused;
            for (Eigen::Index i = 0; i < n; ++i)
                if (!chosen[static_cast<std::size_t>(i)]) unused.push_back(i);
            std::uniform_int_distribution<std::size_t> u(0, unused.size() - 1);
            next = unused[u(rng)];
        }
        centres.row(c) = X.row(next);
        chosen[static_cast<std::size_t>(next)] = true;
        d2 = d2.cwiseMin((X.rowwise() - centres.row(c)).rowwise().squaredNorm());
    }
    return centres;
}

// Squared distance of each row to its assigned centroid, computed directly.
Eigen::VectorXd assigned_distances(const RowMatrixXd& X, const RowMatrixXd& C, const std::vector<int>& a) {
    Eigen::VectorXd d(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) d[i] = (X.row(i) - C.row(a[static_cast<std::size_t>(i)])).squaredNorm();
    return d;
}

RowMatrixXd update_centroids(const RowMatrixXd& X, const std::vector<int>& a, const RowMatrixXd& previous) {
    RowMatrixXd sums = RowMatrixXd::Zero(previous.rows(), previous.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(previous.rows()), 0);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const int c = a[static_cast<std::size_t>(i)];
        sums.row(c) += X.row(i);
        ++counts[static_cast<std::size_t>(c)];
    }
    for (Eigen::Index c = 0; c < sums.rows(); ++c) {
        const auto m = counts[static_cast<std::size_t>(c)];
        sums.row(c) = m > 0 ? RowMatrixXd(sums.row(c) / static_cast<double>(m)) : RowMatrixXd(previous.row(c));
    }
    return sums;
}

struct Run {
    RowMatrixXd centroids;
    std::vector<int> assignments;
    double inertia = 0.0;
    int iterations = 0;
    std::vector<double> trace;
};

Run lloyd(const RowMatrixXd& X, int k, std::mt19937_64& rng, int max_iter, double tol) {
    Run run;
    RowMatrixXd C = kmeans_plus_plus(X, k, rng);
    std::vector<int> prev;
    const auto n = static_cast<std::size_t>(X.rows());
    for (int it = 0; it < max_iter; ++it) {
        std::vector<int> a = assign_nearest(X, C);
        Eigen::VectorXd d = assigned_distances(X, C, a);

        // Re-seed empty clusters at the point farthest from its centroid.
        for (int guard = 0; guard < k; ++guard) {
            std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
            for (int c : a) ++counts[static_cast<std::size_t>(c)];
            const auto empty = std::find(counts.begin(), counts.end(), 0);
            if (empty == counts.end()) break;
            Eigen::Index far = -1;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[static_cast<std::size_t>(a[i])] < 2) continue;
                if (far < 0 || d[static_cast<Eigen::Index>(i)] > d[far]) far = static_cast<Eigen::Index>(i);
            }
            if (far < 0) break;
            C.row(empty - counts.begin()) = X.row(far);
            a = assign_nearest(X, C);
            d = assigned_distances(X, C, a);
        }

        const double inertia = d.mean();
        run.trace.push_back(inertia);
        run.iterations = it + 1;
        run.centroids = C;
        run.assignments = a;
        run.inertia = inertia;
        if (a == prev) break;
        if (run.trace.size() > 1) {
            const double before = run.trace[run.trace.size() - 2];
            if (before - inertia <= tol * before) break;
        }
        C = update_centroids(X, a, C);
        prev = std::move(a);
    }
    return run;
}

}  // namespace

std::vector<int> assign_nearest(const RowMatrixXd& X, const RowMatrixXd& centroids) {
    // argmin_j ||c_j||^2 - 2 x.c_j ; the ||x||^2 term is constant per row.
    const Eigen::VectorXd cn = centroids.rowwise().squaredNorm();
    const RowMatrixXd dots = X * centroids.transpose();
    std::vector<int> a(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        int best = 0;
        double best_score = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
            const double s = cn[j] - 2.0 * dots(i, j);
            if (s < best_score) {
                best_score = s;
                best = static_cast<int>(j);
            }
        }
        a[static_cast<std::size_t>(i)] = best;
    }
    return a;
}

ClusterModel kmeans_fit_impl(const RowMatrixXd& X, const KMeansOptions& opts) {
    if (opts.k < 1) throw Error(Errc::InvalidArgument, "k must be >= 1");
    if (opts.k > X.rows())
        throw Error(Errc::KTooLarge, "k=" + std::to_string(opts.k) + " exceeds " + std::to_string(X.rows()) + " rows");
    if (opts.restarts < 1) throw Error(Errc::InvalidArgument, "restarts must be >= 1");
    if (opts.max_iter < 1) throw Error(Errc::InvalidArgument, "max_iter must be >= 1");
    if (!X.allFinite()) throw Error(Errc::InvalidArgument, "k-means input has non-finite values");

    Run best;
    bool have = false;
    for (int r = 0; r < opts.restarts; ++r) {
        auto rng = make_rng(opts.seed, static_cast<std::uint32_t>(r));
        Run run = lloyd(X, opts.k, rng, opts.max_iter, opts.tol);
        if (!have || run.inertia < best.inertia) {
            best = std::move(run);
            have = true;
        }
    }
    ClusterModel m;
    m.k = opts.k;
    m.centroids = std::move(best.centroids);
    m.assignments = std::move(best.assignments);
    m.inertia = best.inertia;
    m.seed = opts.seed;
    m.iterations = best.iterations;
    m.inertia_trace = std::move(best.trace);
    return m;
}

std::vector<ElbowPoint> elbow_scan_impl(const RowMatrixXd& X, const std::vector<int>& k_values,
                                        const KMeansOptions& base) {
    if (k_values.empty()) throw Error(Errc::InvalidArgument, "no k values to scan");
    std::vector<ElbowPoint> out;
    for (int k : k_values) {
        KMeansOptions opts = base;
        opts.k = k;
        const ClusterModel m = kmeans_fit_impl(X, opts);
        std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(k));
        for (std::size_t i = 0; i < m.assignments.size(); ++i)
            members[static_cast<std::size_t>(m.assignments[i])].push_back(static_cast<Eigen::Index>(i));
        double sum = 0.0;
        int groups = 0;
        for (const auto& rows : members) {
            if (rows.empty()) continue;
            sum += variance(X, std::span<const Eigen::Index>(rows));
            ++groups;
        }
        out.push_back({k, sum / groups, m.inertia});
    }
    return out;
}

// ---------------------------------------------------------------------------
// t-SNE

namespace {

Eigen::VectorXd row_sq_distances(const RowMatrixXd& X, Eigen::Index i) {
    return (X.rowwise() - X.row(i)).rowwise().squaredNorm();
}

// Entropy and normalised conditional row for precision beta; self excluded.
double conditional_row(const Eigen::VectorXd& d2, Eigen::Index self, double beta, Eigen::VectorXd& p) {
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < d2.size(); ++j)
        if (j != self) dmin = std::min(dmin, d2[j]);
    p.resize(d2.size());
    double sum = 0.0;
    double weighted = 0.0;
    for (Eigen::Index j = 0; j < d2.size(); ++j) {
        if (j == self) {
            p[j] = 0.0;
            continue;
        }
        const double shifted = d2[j] - dmin;
        p[j] = std::exp(-beta * shifted);
        sum += p[j];
        weighted += shifted * p[j];
    }
    p /= sum;
    return std::log(sum) + beta * weighted / sum;
}

double find_beta(const Eigen::VectorXd& d2, Eigen::Index self, double log_perplexity, double tol,
                 Eigen::VectorXd& p) {
    double beta = 1.0;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 200; ++iter) {
        const double h = conditional_row(d2, self, beta, p);
        const double diff = h - log_perplexity;
        if (std::abs(diff) < tol) break;
        if (diff > 0) {
            lo = beta;
            beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
        } else {
            hi = beta;
            beta = std::isinf(lo) ? beta / 2.0 : (beta + lo) / 2.0;
        }
    }
    conditional_row(d2, self, beta, p);
    return beta;
}

void check_perplexity(Eigen::Index n, double perplexity) {
    if (n < 4) throw Error(Errc::InvalidArgument, "t-SNE needs at least 4 points");
    if (!(perplexity > 0.0)) throw Error(Errc::InvalidArgument, "perplexity must be positive");
    if (!(perplexity < static_cast<double>(n - 1) / 3.0))
        throw Error(Errc::PerplexityTooHigh, "perplexity " + std::to_string(perplexity) + " must be < (N-1)/3 = " +
                                                 std::to_string(static_cast<double>(n - 1) / 3.0));
}

// Returns KL(P || Q); fills grad with d KL(e*P || Q) / dY.
double kl_and_gradient(const RowMatrixXd& P, const RowMatrixXd& Y, double exaggeration, RowMatrixXd* grad) {
    const Eigen::Index n = Y.rows();
    RowMatrixXd W(n, n);
    double z = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        W(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double dx = Y(i, 0) - Y(j, 0);
            const double dy = Y(i, 1) - Y(j, 1);
            const double w = 1.0 / (1.0 + dx * dx + dy * dy);
            W(i, j) = w;
            W(j, i) = w;
            z += 2.0 * w;
        }
    }
    double kl = 0.0;
    double psum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double p = P(i, j);
            psum += p;
            if (p > 0.0) kl += p * std::log(p / (W(i, j) / z));
        }
    }
    if (grad) {
        grad->setZero(n, 2);
        const double scale = psum / z;  // exaggeration multiplies the attractive term only
        for (Eigen::Index i = 0; i < n; ++i) {
            double gx = 0.0, gy = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (i == j) continue;
                const double w = W(i, j);
                const double m = (exaggeration * P(i, j) - scale * w) * w;
                gx += m * (Y(i, 0) - Y(j, 0));
                gy += m * (Y(i, 1) - Y(j, 1));
            }
            (*grad)(i, 0) = 4.0 * gx;
            (*grad)(i, 1) = 4.0 * gy;
        }
    }
    return kl;
}

}  // namespace

double tsne_row_entropy(const RowMatrixXd& X, Eigen::Index i, double beta) {
    Eigen::VectorXd p;
    return conditional_row(row_sq_distances(X, i), i, beta, p);
}

Eigen::VectorXd tsne_precisions(const RowMatrixXd& X, double perplexity, double tol) {
    check_perplexity(X.rows(), perplexity);
    Eigen::VectorXd betas(X.rows());
    Eigen::VectorXd p;
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        betas[i] = find_beta(row_sq_distances(X, i), i, std::log(perplexity), tol, p);
    return betas;
}

RowMatrixXd tsne_joint_probabilities(const RowMatrixXd& X, double perplexity, double tol) {
    check_perplexity(X.rows(), perplexity);
    const Eigen::Index n = X.rows();
    RowMatrixXd cond(n, n);
    Eigen::VectorXd p;
    for (Eigen::Index i = 0; i < n; ++i) {
        find_beta(row_sq_distances(X, i), i, std::log(perplexity), tol, p);
        cond.row(i) = p.transpose();
    }
    RowMatrixXd P = (cond + cond.transpose()) / (2.0 * static_cast<double>(n));
    P = P.cwiseMax(1e-12);
    P.diagonal().setZero();
    P /= P.sum();
    return P;
}

double tsne_kl(const RowMatrixXd& P, const RowMatrixXd& Y) { return kl_and_gradient(P, Y, 1.0, nullptr); }

RowMatrixXd tsne_gradient(const RowMatrixXd& P, const RowMatrixXd& Y, double exaggeration) {
    RowMatrixXd g;
    kl_and_gradient(P, Y, exaggeration, &g);
    return g;
}

TsneLayout tsne_impl(const RowMatrixXd& X, const TsneOptions& opts) {
    check_perplexity(X.rows(), opts.perplexity);
    if (opts.iters < 1) throw Error(Errc::InvalidArgument, "iters must be >= 1");
    if (!X.allFinite()) throw Error(Errc::InvalidArgument, "t-SNE input has non-finite values");
    const Eigen::Index n = X.rows();
    const RowMatrixXd P = tsne_joint_probabilities(X, opts.perplexity);

    auto rng = make_rng(opts.seed, 0);
    std::normal_distribution<double> normal(0.0, 1e-4);
    RowMatrixXd Y(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        Y(i, 0) = normal(rng);
        Y(i, 1) = normal(rng);
    }

    RowMatrixXd update = RowMatrixXd::Zero(n, 2);
    RowMatrixXd gains = RowMatrixXd::Ones(n, 2);
    RowMatrixXd grad;
    TsneLayout out;
    out.kl_trace.reserve(static_cast<std::size_t>(opts.iters));
    for (int t = 0; t < opts.iters; ++t) {
        // Velocity and gains restart when exaggeration ends; carrying the exaggerated-phase
        // step sizes into the plain objective makes small layouts oscillate and fling points out.
        if (t == opts.exaggeration_iters && t > 0) {
            update.setZero();
            gains.setOnes();
        }
        const double exaggeration = t < opts.exaggeration_iters ? opts.early_exaggeration : 1.0;
        // KL is always reported against the true P; only the gradient is exaggerated.
        const double kl = kl_and_gradient(P, Y, exaggeration, &grad);
        out.kl_trace.push_back(kl);

        const double momentum = t < opts.momentum_switch_iter ? opts.initial_momentum : opts.final_momentum;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index c = 0; c < 2; ++c) {
                const bool same_sign = (grad(i, c) > 0) == (update(i, c) > 0);
                gains(i, c) = same_sign ? gains(i, c) * 0.8 : gains(i, c) + 0.2;
                gains(i, c) = std::max(gains(i, c), opts.min_gain);
                update(i, c) = momentum * update(i, c) - opts.learning_rate * gains(i, c) * grad(i, c);
            }
        }
        Y += update;
        Y.rowwise() -= Y.colwise().mean();
    }

    out.coords = std::move(Y);
    out.perplexity = opts.perplexity;
    out.seed = opts.seed;
    out.kl_final = tsne_kl(P, out.coords);
    return out;
}

}  // namespace phenoscope
