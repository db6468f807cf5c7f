#pragma once

#include "phenoscope/types.hpp"

#include <cstdlib>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

namespace testing {

namespace fs = std::filesystem;

// Fresh directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::string templ = (fs::temp_directory_path() / "phenoscope-XXXXXX").string();
        if (!mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
        path_ = templ;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

// Directory written by the reference-model fixture, or empty when it is unavailable.
inline fs::path golden_dir() {
    if (const char* env = std::getenv("PHENOSCOPE_GOLDEN_DIR")) return env;
#ifdef PHENOSCOPE_GOLDEN_DIR
    return PHENOSCOPE_GOLDEN_DIR;
#else
    return {};
#endif
}

inline bool have_golden() {
    const fs::path d = golden_dir();
    return !d.empty() && fs::exists(d / "golden.json");
}

// Hand-rolled generators for property tests.
struct Gen {
    std::mt19937_64 rng;
    explicit Gen(std::uint64_t seed) : rng(seed) {}

    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
    double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(rng); }

    phenoscope::RowMatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, double sd = 1.0) {
        phenoscope::RowMatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(0.0, sd);
        return m;
    }

    // Isotropic Gaussian blobs; labels[i] is the blob of row i.
    phenoscope::RowMatrixXd blobs(int n_blobs, int per_blob, int dim, double spread, double sd,
                                  std::vector<int>& labels) {
        phenoscope::RowMatrixXd centers = normal_matrix(n_blobs, dim, spread);
        phenoscope::RowMatrixXd x(static_cast<Eigen::Index>(n_blobs) * per_blob, dim);
        labels.clear();
        for (int b = 0; b < n_blobs; ++b)
            for (int i = 0; i < per_blob; ++i) {
                const Eigen::Index r = static_cast<Eigen::Index>(b) * per_blob + i;
                for (int d = 0; d < dim; ++d) x(r, d) = centers(b, d) + normal(0.0, sd);
                labels.push_back(b);
            }
        return x;
    }
};

}  // namespace testing
