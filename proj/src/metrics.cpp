#include "phenoscope/metrics.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

namespace phenoscope {

std::vector<int> encode_groups(std::span<const std::string> labels) {
    std::unordered_map<std::string, int> ids;
    std::vector<int> out;
    out.reserve(labels.size());
    for (const auto& l : labels) {
        if (l.empty()) {
            out.push_back(-1);
            continue;
        }
        auto [it, inserted] = ids.try_emplace(l, static_cast<int>(ids.size()));
        out.push_back(it->second);
    }
    return out;
}

double fold_reduction(std::span<const int> assignments, int k, const std::set<int>& kept_clusters,
                      const std::vector<ImageRecord>& records) {
    if (kept_clusters.empty()) throw Error(Errc::InvalidArgument, "no clusters kept");
    for (int c : kept_clusters)
        if (c < 0 || c >= k)
            throw Error(Errc::InvalidArgument, "kept cluster " + std::to_string(c) + " outside [0, " +
                                                   std::to_string(k) + ")");
    if (assignments.size() != records.size())
        throw Error(Errc::DimMismatch, std::to_string(assignments.size()) + " assignments for " +
                                           std::to_string(records.size()) + " records");
    std::unordered_set<std::string> all;
    std::unordered_set<std::string> kept;
    for (std::size_t i = 0; i < records.size(); ++i) {
        all.insert(records[i].compound_id);
        if (kept_clusters.count(assignments[i])) kept.insert(records[i].compound_id);
    }
    if (kept.empty()) throw Error(Errc::NoKeptCompounds, "kept clusters contain no compounds");
    return static_cast<double>(all.size()) / static_cast<double>(kept.size());
}

ExplainedVarianceReport explained_variance_report(std::span<const double> ratios, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw Error(Errc::InvalidArgument, "threshold must be in (0, 1]");
    // Absorbs rounding in ratios that are meant to sum to exactly 1.
    constexpr double slack = 1e-12;
    ExplainedVarianceReport out;
    double acc = 0.0;
    for (double r : ratios) {
        acc += r;
        out.cumulative.push_back(acc);
        if (out.components_needed == 0 && acc >= threshold - slack)
            out.components_needed = static_cast<int>(out.cumulative.size());
    }
    if (out.components_needed == 0)
        throw Error(Errc::ThresholdUnreachable,
                    "ratios sum to " + std::to_string(acc) + " < threshold " + std::to_string(threshold));
    return out;
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw Error(Errc::DimMismatch, "labelings differ in length");
    const auto n = static_cast<double>(a.size());
    if (a.size() < 2) return 1.0;
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ra;
    std::map<int, double> rb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1;
        ra[a[i]] += 1;
        rb[b[i]] += 1;
    }
    auto choose2 = [](double x) { return x * (x - 1) / 2; };
    double index = 0, sa = 0, sb = 0;
    for (const auto& [key, c] : joint) index += choose2(c);
    for (const auto& [key, c] : ra) sa += choose2(c);
    for (const auto& [key, c] : rb) sb += choose2(c);
    const double expected = sa * sb / choose2(n);
    const double max_index = (sa + sb) / 2;
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

}  // namespace phenoscope
