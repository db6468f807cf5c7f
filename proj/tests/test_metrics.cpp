#include "phenoscope/embed.hpp"
#include "phenoscope/error.hpp"
#include "phenoscope/metrics.hpp"
#include "support.hpp"

#include <doctest.h>

#include <numeric>

using namespace phenoscope;
using testing::Gen;

namespace {

// Two passes, written as plain loops: centroid first, then squared deviations.
double naive_variance(const RowMatrixXd& X, const std::vector<Eigen::Index>& rows) {
    std::vector<double> c(static_cast<std::size_t>(X.cols()), 0.0);
    for (auto r : rows)
        for (Eigen::Index j = 0; j < X.cols(); ++j) c[static_cast<std::size_t>(j)] += X(r, j);
    for (auto& v : c) v /= static_cast<double>(rows.size());
    double s = 0.0;
    for (auto r : rows)
        for (Eigen::Index j = 0; j < X.cols(); ++j) {
            const double d = X(r, j) - c[static_cast<std::size_t>(j)];
            s += d * d;
        }
    return s / static_cast<double>(rows.size());
}

// Hubert-Arabie form from brute-force pair counts.
double pair_count_ari(const std::vector<int>& a, const std::vector<int>& b) {
    double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            if (sa && sb) ++n11;
            else if (sa) ++n10;
            else if (sb) ++n01;
            else ++n00;
        }
    const double den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    return den == 0 ? 1.0 : 2.0 * (n00 * n11 - n01 * n10) / den;
}

ImageRecord rec(const std::string& compound, int i) {
    return {"x.png", "P1", "A" + std::to_string(i), 0, compound, "CC", {}};
}

}  // namespace

TEST_SUITE("variance") {
    TEST_CASE("hand examples") {
        RowMatrixXd one(1, 3);
        one << 1, 2, 3;
        CHECK(variance(one) == 0.0);
        RowMatrixXd two(2, 2);
        two << 0, 0, 2, 0;
        CHECK(variance(two) == 1.0);
        CHECK_THROWS_AS(variance(two, std::span<const Eigen::Index>()), Error);
    }

    TEST_CASE("matches the two-pass loop oracle") {
        Gen g(1);
        const RowMatrixXd X = g.normal_matrix(50, 8, 3.0);
        std::vector<Eigen::Index> all(50);
        std::iota(all.begin(), all.end(), 0);
        CHECK(std::abs(variance(X) - naive_variance(X, all)) <= 1e-9);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<Eigen::Index> sub;
            for (Eigen::Index i = 0; i < 50; ++i)
                if (g.uniform_int(0, 2) == 0) sub.push_back(i);
            if (sub.empty()) sub.push_back(0);
            CHECK(std::abs(variance(X, std::span<const Eigen::Index>(sub)) - naive_variance(X, sub)) <= 1e-9);
        }
    }

    TEST_CASE("translation invariance and quadratic scaling") {
        Gen g(2);
        for (int trial = 0; trial < 20; ++trial) {
            const RowMatrixXd X = g.normal_matrix(g.uniform_int(2, 40), g.uniform_int(1, 10));
            const double v = variance(X);
            Eigen::RowVectorXd c = g.normal_matrix(1, X.cols(), 100.0).row(0);
            const double shifted = variance(RowMatrixXd(X.rowwise() + c));
            CHECK(std::abs(shifted - v) <= 1e-7 * v);
            const double a = g.uniform(-5, 5);
            CHECK(std::abs(variance(RowMatrixXd(a * X)) - a * a * v) <= 1e-7 * a * a * v);
        }
    }
}

TEST_SUITE("grouped variance") {
    TEST_CASE("singletons give 0, one group gives 1") {
        Gen g(3);
        const RowMatrixXd X = g.normal_matrix(10, 3);
        std::vector<int> singles(10);
        std::iota(singles.begin(), singles.end(), 0);
        CHECK(group_variance_ratio(X, std::span<const int>(singles)).ratio == 0.0);
        std::vector<int> one(10, 0);
        const auto r = group_variance_ratio(X, std::span<const int>(one));
        CHECK(r.ratio == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(r.group_count == 1);
    }

    TEST_CASE("unweighted mean over groups matches a loop oracle") {
        Gen g(4);
        const RowMatrixXd X = g.normal_matrix(40, 5);
        std::vector<int> groups;
        for (int i = 0; i < 40; ++i) groups.push_back(g.uniform_int(0, 6));
        std::map<int, std::vector<Eigen::Index>> members;
        for (int i = 0; i < 40; ++i) members[groups[static_cast<std::size_t>(i)]].push_back(i);
        double sum = 0.0;
        for (auto& [k, rows] : members) sum += naive_variance(X, rows);
        std::vector<Eigen::Index> all(40);
        std::iota(all.begin(), all.end(), 0);
        const auto r = group_variance_ratio(X, std::span<const int>(groups));
        CHECK(r.mean_intra_group_variance == doctest::Approx(sum / members.size()).epsilon(1e-12));
        CHECK(r.ratio == doctest::Approx(sum / members.size() / naive_variance(X, all)).epsilon(1e-12));
    }

    TEST_CASE("unassigned rows are rejected") {
        const RowMatrixXd X = RowMatrixXd::Zero(3, 2);
        std::vector<int> short_groups{0, 1};
        CHECK_THROWS_AS(group_variance_ratio(X, std::span<const int>(short_groups)), Error);
        std::vector<int> hole{0, -1, 0};
        CHECK_THROWS_AS(group_variance_ratio(X, std::span<const int>(hole)), Error);
        std::vector<std::string> labels{"a", "", "b", "a"};
        CHECK(encode_groups(labels) == std::vector<int>{0, -1, 1, 0});
    }

    TEST_CASE("hierarchical features order well < chemical cluster < 1") {
        Gen g(5);
        const int clusters = 8, wells_per = 6, fields = 4, dim = 12;
        RowMatrixXd X(clusters * wells_per * fields, dim);
        std::vector<int> well, chem;
        Eigen::Index r = 0;
        for (int c = 0; c < clusters; ++c) {
            const Eigen::RowVectorXd cc = g.normal_matrix(1, dim, 10.0).row(0);
            for (int w = 0; w < wells_per; ++w) {
                const Eigen::RowVectorXd wc = cc + g.normal_matrix(1, dim, 3.0).row(0);
                for (int f = 0; f < fields; ++f, ++r) {
                    X.row(r) = wc + g.normal_matrix(1, dim, 0.5).row(0);
                    well.push_back(c * wells_per + w);
                    chem.push_back(c);
                }
            }
        }
        const double rw = group_variance_ratio(X, std::span<const int>(well)).ratio;
        const double rc = group_variance_ratio(X, std::span<const int>(chem)).ratio;
        CHECK(rw < rc);
        CHECK(rc < 1.0);
    }

    TEST_CASE("random groupings of i.i.d. data stay below 1.05") {
        Gen g(6);
        for (int trial = 0; trial < 20; ++trial) {
            const int n = g.uniform_int(20, 200);
            const RowMatrixXd X = g.normal_matrix(n, g.uniform_int(1, 8));
            const int m = g.uniform_int(2, 6);
            std::vector<int> groups(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) groups[static_cast<std::size_t>(i)] = i % (n / m);
            const auto r = group_variance_ratio(X, std::span<const int>(groups));
            CHECK(r.ratio < 1.05);
            CHECK(r.ratio >= 0.0);
        }
    }
}

TEST_SUITE("fold reduction") {
    TEST_CASE("all clusters kept is 1") {
        std::vector<ImageRecord> r{rec("A", 0), rec("B", 1), rec("C", 2)};
        std::vector<int> a{0, 1, 2};
        CHECK(fold_reduction(a, 3, {0, 1, 2}, r) == 1.0);
    }

    TEST_CASE("100 compounds, kept clusters cover 4 → 25") {
        std::vector<ImageRecord> r;
        std::vector<int> a;
        for (int c = 0; c < 100; ++c)
            for (int f = 0; f < 3; ++f) {
                r.push_back(rec("CMP" + std::to_string(c), c * 3 + f));
                a.push_back(c < 4 ? (f == 0 ? 1 : 2) : 0);
            }
        CHECK(fold_reduction(a, 3, {1}, r) == 25.0);
        CHECK(fold_reduction(a, 3, {1, 2}, r) == 25.0);
    }

    TEST_CASE("a compound counts once however many images it has in kept clusters") {
        std::vector<ImageRecord> r{rec("A", 0), rec("A", 1), rec("B", 2), rec("C", 3)};
        std::vector<int> a{1, 1, 0, 0};
        CHECK(fold_reduction(a, 2, {1}, r) == 3.0);
    }

    TEST_CASE("errors") {
        std::vector<ImageRecord> r{rec("A", 0), rec("B", 1)};
        std::vector<int> a{0, 0};
        try {
            fold_reduction(a, 2, {1}, r);
            FAIL("expected NoKeptCompounds");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::NoKeptCompounds);
        }
        CHECK_THROWS_AS(fold_reduction(a, 2, {}, r), Error);
        CHECK_THROWS_AS(fold_reduction(a, 2, {2}, r), Error);
        std::vector<int> short_a{0};
        CHECK_THROWS_AS(fold_reduction(short_a, 2, {0}, r), Error);
    }
}

TEST_SUITE("explained variance") {
    TEST_CASE("cumulative arithmetic") {
        std::vector<double> one{1.0};
        CHECK(explained_variance_report(one, 0.9).components_needed == 1);
        std::vector<double> three{0.5, 0.3, 0.2};
        const auto r = explained_variance_report(three, 0.9);
        CHECK(r.components_needed == 3);
        REQUIRE(r.cumulative.size() == 3);
        CHECK(r.cumulative[1] == doctest::Approx(0.8));
        std::vector<double> partial{0.5, 0.3};
        try {
            explained_variance_report(partial, 0.9);
            FAIL("expected ThresholdUnreachable");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ThresholdUnreachable);
        }
        CHECK_THROWS_AS(explained_variance_report(three, 0.0), Error);
        CHECK_THROWS_AS(explained_variance_report(three, 1.5), Error);
    }

    TEST_CASE("rank-10 data with a 1% noise floor needs 10 components for 90%") {
        Gen g(7);
        const int n = 500, d = 60;
        // Orthonormal basis and equal score variances: nine directions carry 89.1%.
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g.normal_matrix(d, 10)).householderQ();
        const RowMatrixXd basis = q.leftCols(10).transpose();
        Eigen::MatrixXd raw = g.normal_matrix(n, 10);
        raw.rowwise() -= raw.colwise().mean();
        const Eigen::MatrixXd u = Eigen::HouseholderQR<Eigen::MatrixXd>(raw).householderQ();
        const RowMatrixXd scores = u.leftCols(10) * std::sqrt(double(n));
        RowMatrixXd X = scores * basis;
        const double signal = variance(X);
        X += g.normal_matrix(n, d, std::sqrt(0.01 * signal / d));
        const PcaModel m = fit_pca(X, 20);
        const auto r = explained_variance_report(m, 0.9);
        CHECK(r.components_needed == 10);
        CHECK(r.cumulative[9] > 0.9);
    }
}

TEST_SUITE("ari") {
    TEST_CASE("identical and relabelled partitions score 1") {
        std::vector<int> a{0, 0, 1, 1, 2, 2};
        std::vector<int> b{5, 5, 3, 3, 9, 9};
        CHECK(adjusted_rand_index(a, b) == doctest::Approx(1.0));
    }

    TEST_CASE("matches the pair-counting form on random labelings") {
        Gen g(8);
        for (int trial = 0; trial < 30; ++trial) {
            const int n = g.uniform_int(2, 60);
            std::vector<int> a, b;
            for (int i = 0; i < n; ++i) {
                a.push_back(g.uniform_int(0, 4));
                b.push_back(g.uniform_int(0, 3));
            }
            CHECK(adjusted_rand_index(a, b) == doctest::Approx(pair_count_ari(a, b)).epsilon(1e-9));
        }
    }
}
