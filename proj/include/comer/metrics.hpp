// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "comer/common.hpp"

namespace comer {

// Levenshtein distance over token ids with unit insert/delete/substitute
// costs; a proxy for symbol-plus-structure error counts.
inline Index token_edit_distance(const std::vector<Index>& pred, const std::vector<Index>& ref) {
    const size_t n = pred.size(), m = ref.size();
    std::vector<Index> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = Index(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = Index(i);
        for (size_t j = 1; j <= m; ++j) {
            Index sub = prev[j - 1] + (pred[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// Exact-match and error-tolerant rates plus accuracy stratified by reference
// length. `long_*` summarizes the length >= 15 slice used by the ablation.
struct EvalReport {
    double exprate = 0, err_le_1 = 0, err_le_2 = 0, err_le_3 = 0;
    std::array<double, 4> bucket_acc{};   // reference lengths 1-9, 10-19, 20-29, 30+
    std::array<Index, 4> bucket_count{};
    double long_acc = 0;
    Index long_count = 0;
    Index total = 0;
};

inline Index length_bucket(Index len) { return len <= 9 ? 0 : len <= 19 ? 1 : len <= 29 ? 2 : 3; }

inline const char* bucket_label(Index b) {
    static const char* labels[4] = {"1-9", "10-19", "20-29", "30+"};
    return labels[b];
}

inline EvalReport report_from_distances(const std::vector<Index>& distances, const std::vector<Index>& ref_lengths) {
    check_as<UsageError>(!distances.empty(), "report: no samples");
    check_as<UsageError>(distances.size() == ref_lengths.size(), "report: distance/length count mismatch");
    EvalReport r;
    r.total = Index(distances.size());
    std::array<Index, 4> bucket_hit{};
    Index long_hit = 0;
    Index exact = 0, le1 = 0, le2 = 0, le3 = 0;
    for (size_t i = 0; i < distances.size(); ++i) {
        Index d = distances[i];
        check_as<UsageError>(d >= 0, "report: negative distance");
        exact += d == 0;
        le1 += d <= 1;
        le2 += d <= 2;
        le3 += d <= 3;
        Index b = length_bucket(ref_lengths[i]);
        r.bucket_count[size_t(b)] += 1;
        bucket_hit[size_t(b)] += d == 0;
        if (ref_lengths[i] >= 15) {
            r.long_count += 1;
            long_hit += d == 0;
        }
    }
    double n = double(r.total);
    r.exprate = double(exact) / n;
    r.err_le_1 = double(le1) / n;
    r.err_le_2 = double(le2) / n;
    r.err_le_3 = double(le3) / n;
    for (Index b = 0; b < 4; ++b)
        r.bucket_acc[size_t(b)] = r.bucket_count[size_t(b)] ? double(bucket_hit[size_t(b)]) / double(r.bucket_count[size_t(b)]) : 0.0;
    r.long_acc = r.long_count ? double(long_hit) / double(r.long_count) : 0.0;
    return r;
}

inline nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json buckets = nlohmann::json::object();
    for (Index b = 0; b < 4; ++b)
        buckets[bucket_label(b)] = {{"accuracy", r.bucket_acc[size_t(b)]}, {"count", r.bucket_count[size_t(b)]}};
    return {{"exprate", r.exprate},
            {"err_le_1", r.err_le_1},
            {"err_le_2", r.err_le_2},
            {"err_le_3", r.err_le_3},
            {"buckets", buckets},
            {"long_acc", r.long_acc},
            {"long_count", r.long_count},
            {"total", r.total}};
}

}  // namespace comer
