#pragma once

// Reference implementations used only by tests. Each one takes the most
// literal route to the answer and shares no code with src/.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "lfr/ledger.hpp"

namespace oracle {

using Big = boost::multiprecision::cpp_bin_float_50;

// exp(mean) with the mean summed in 50-digit arithmetic.
inline double ppl_high_precision(const std::vector<double>& nlls) {
    Big sum = 0;
    for (double x : nlls) sum += Big(x);
    Big mean = sum / Big(nlls.size());
    return static_cast<double>(boost::multiprecision::exp(mean));
}

// Classes spelled out from the definitions over raw values with epsilon = 0:
//   learned   - every step is <=, at least one <
//   unlearned - every step is >=, at least one >
//   forgotten - some i < j with v[i+1] > v[i] and v[j+1] < v[j]
// Descents are counted as interior peaks of the sequence after merging
// equal neighbours.
inline lfr::TrajectoryClass classify_literal(const std::vector<double>& v) {
    using lfr::TrajectoryKind;
    if (v.size() < 2) return {TrajectoryKind::Insufficient, 0};
    bool any_up = false, any_down = false;
    for (std::size_t i = 0; i + 1 < v.size(); ++i) {
        any_up |= v[i + 1] > v[i];
        any_down |= v[i + 1] < v[i];
    }
    if (!any_up && !any_down) return {TrajectoryKind::Insufficient, 0};
    if (!any_up) return {TrajectoryKind::Learned, 0};
    if (!any_down) return {TrajectoryKind::Unlearned, 0};

    bool rise_then_fall = false;
    for (std::size_t i = 0; i + 1 < v.size(); ++i)
        for (std::size_t j = i + 1; j + 1 < v.size(); ++j)
            if (v[i + 1] > v[i] && v[j + 1] < v[j]) rise_then_fall = true;
    if (!rise_then_fall) return {TrajectoryKind::Mixed, 0};

    std::vector<double> merged;
    for (double x : v)
        if (merged.empty() || merged.back() != x) merged.push_back(x);
    std::uint32_t peaks = 0;
    for (std::size_t i = 1; i + 1 < merged.size(); ++i)
        if (merged[i] > merged[i - 1] && merged[i] > merged[i + 1]) ++peaks;
    return {TrajectoryKind::Forgotten, peaks};
}

// Sort everything by (ppl desc, id asc) and take the first ceil(keep * n).
inline std::vector<lfr::BlockId> focus_by_full_sort(const std::map<lfr::BlockId, double>& ppls,
                                                    std::size_t keep_count) {
    std::vector<std::pair<double, lfr::BlockId>> all;
    for (const auto& [id, p] : ppls) all.emplace_back(p, id);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<lfr::BlockId> out;
    for (std::size_t i = 0; i < keep_count; ++i) out.push_back(all[i].second);
    std::sort(out.begin(), out.end());
    return out;
}

using Points = std::vector<std::vector<double>>;

inline double partition_inertia(const Points& pts, const std::vector<int>& label, int k) {
    const std::size_t d = pts.front().size();
    double total = 0.0;
    for (int c = 0; c < k; ++c) {
        std::vector<double> mean(d, 0.0);
        int count = 0;
        for (std::size_t i = 0; i < pts.size(); ++i)
            if (label[i] == c) {
                ++count;
                for (std::size_t j = 0; j < d; ++j) mean[j] += pts[i][j];
            }
        if (count == 0) continue;
        for (auto& m : mean) m /= count;
        for (std::size_t i = 0; i < pts.size(); ++i)
            if (label[i] == c)
                for (std::size_t j = 0; j < d; ++j) total += (pts[i][j] - mean[j]) * (pts[i][j] - mean[j]);
    }
    return total;
}

// Minimum inertia over all 2-partitions with both parts nonempty.
inline double best_two_partition(const Points& pts, std::vector<int>* best_label = nullptr) {
    const std::size_t n = pts.size();
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        if (mask & 1u) continue;  // symmetry: point 0 always in part 0
        std::vector<int> label(n);
        for (std::size_t i = 0; i < n; ++i) label[i] = (mask >> i) & 1u;
        const double v = partition_inertia(pts, label, 2);
        if (v < best) {
            best = v;
            if (best_label) *best_label = label;
        }
    }
    return best;
}

inline std::vector<std::vector<double>> naive_cosine(const Points& a, const Points& b) {
    std::vector<std::vector<double>> out(a.size(), std::vector<double>(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) {
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t k = 0; k < a[i].size(); ++k) {
                ab += a[i][k] * b[j][k];
                aa += a[i][k] * a[i][k];
                bb += b[j][k] * b[j][k];
            }
            out[i][j] = ab / std::sqrt(aa * bb);
        }
    return out;
}

struct Moments {
    double mean, variance;
};

inline Moments two_pass(const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, ss / static_cast<double>(xs.size())};
}

}  // namespace oracle
