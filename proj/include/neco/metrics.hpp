#pragma once

// Pixel pooling by role and threshold-free / operating-point OOD metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "neco/dataset.hpp"
#include "neco/error.hpp"
#include "neco/score_map.hpp"

namespace neco {

struct ScorePool {
    std::vector<double> id_scores;
    std::vector<double> ood_scores;
    std::string method;
    std::string condition;  // empty = all samples
};

/// Appends the OOD-oriented scores of one sample to `pool`, split by role.
inline void pool_sample(ScorePool& pool, const ScoreMap& map, const RoleMask& roles) {
    require_orientation(map, Orientation::higher_means_ood, "pool_scores");
    if (map.size() != roles.size()) throw DataError("pool_scores: score map and role mask sizes differ");
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto role = roles.role(i);
        if (role == PixelRole::ignore || !map.is_valid(i)) continue;
        const double v = map.values[i];
        if (!std::isfinite(v)) throw NumericError("non-finite score at pixel " + std::to_string(i));
        (role == PixelRole::ood ? pool.ood_scores : pool.id_scores).push_back(v);
    }
}

/// Pools every sample (or only those tagged `condition_filter`).
inline ScorePool pool_scores(std::span<const ScoreMap> maps, std::span<const RoleMask> roles,
                             std::span<const std::string> conditions,
                             const std::optional<std::string>& condition_filter = std::nullopt) {
    if (maps.size() != roles.size() || maps.size() != conditions.size())
        throw UsageError("pool_scores: maps, roles and conditions must align");
    ScorePool pool;
    if (condition_filter) pool.condition = *condition_filter;
    for (std::size_t s = 0; s < maps.size(); ++s) {
        if (condition_filter && conditions[s] != *condition_filter) continue;
        pool_sample(pool, maps[s], roles[s]);
    }
    if (pool.id_scores.empty() && pool.ood_scores.empty()) throw DataError("pool_scores: no scored pixels in pool");
    return pool;
}

namespace metrics_detail {

inline void require_both_sides(const ScorePool& pool, const char* what) {
    if (pool.id_scores.empty() || pool.ood_scores.empty())
        throw DataError(std::string(what) + ": needs both ID and OOD scores (have " +
                        std::to_string(pool.id_scores.size()) + " ID, " + std::to_string(pool.ood_scores.size()) +
                        " OOD)");
}

struct Labeled {
    double score;
    bool ood;
};

inline std::vector<Labeled> labeled(const ScorePool& pool) {
    std::vector<Labeled> all;
    all.reserve(pool.id_scores.size() + pool.ood_scores.size());
    for (double v : pool.id_scores) all.push_back({v, false});
    for (double v : pool.ood_scores) all.push_back({v, true});
    return all;
}

}  // namespace metrics_detail

/// P(ood > id) + 0.5 P(ood == id) via the Mann-Whitney rank sum with average
/// ranks for ties.
inline double auroc(const ScorePool& pool) {
    metrics_detail::require_both_sides(pool, "auroc");
    auto all = metrics_detail::labeled(pool);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    // Ranks are half-integers, so the sum is exact in double up to ~2^51.
    double ood_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i + 1;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        std::size_t ood_in_group = 0;
        for (std::size_t t = i; t < j; ++t) ood_in_group += all[t].ood;
        ood_rank_sum += avg_rank * static_cast<double>(ood_in_group);
        i = j;
    }
    const double n_ood = static_cast<double>(pool.ood_scores.size());
    const double n_id = static_cast<double>(pool.id_scores.size());
    const double u = ood_rank_sum - n_ood * (n_ood + 1.0) / 2.0;
    return u / (n_ood * n_id);
}

struct RocPoint {
    double fpr;
    double tpr;
    double threshold;  // pixels with score >= threshold are flagged OOD
};

struct RocCurve {
    std::vector<RocPoint> points;  // thresholds strictly decreasing, (0,0) ... (1,1)
    double auroc = 0.5;
    bool approximate = false;
};

inline double trapezoid_area(const RocCurve& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
    }
    return area;
}

/// Exact step curve over every distinct score, highest threshold first.
inline RocCurve roc_curve(const ScorePool& pool) {
    metrics_detail::require_both_sides(pool, "roc_curve");
    auto all = metrics_detail::labeled(pool);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    const double n_ood = static_cast<double>(pool.ood_scores.size());
    const double n_id = static_cast<double>(pool.id_scores.size());

    RocCurve curve;
    curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t i = 0;
    while (i < all.size()) {
        const double threshold = all[i].score;
        while (i < all.size() && all[i].score == threshold) {
            (all[i].ood ? tp : fp) += 1;
            ++i;
        }
        curve.points.push_back({static_cast<double>(fp) / n_id, static_cast<double>(tp) / n_ood, threshold});
    }
    curve.auroc = trapezoid_area(curve);
    return curve;
}

/// Smallest FPR among operating points with TPR >= target; no interpolation.
inline double fpr_at_tpr(const RocCurve& curve, double target) {
    if (!(target > 0.0 && target <= 1.0)) throw UsageError("target TPR must lie in (0, 1]");
    double best = 1.0;
    for (const auto& p : curve.points)
        if (p.tpr >= target) best = std::min(best, p.fpr);
    return best;
}

inline double mean_of(std::span<const double> v, const char* what) {
    if (v.empty()) throw DataError(std::string("mean_scores: no ") + what + " scores");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline std::pair<double, double> mean_scores(const ScorePool& pool) {
    return {mean_of(pool.id_scores, "ID"), mean_of(pool.ood_scores, "OOD")};
}

/// Fixed-bin score histogram by role. Bin b covers [lo + b*w, lo + (b+1)*w);
/// the maximum lands in the last bin.
struct BinnedPool {
    double lo = 0.0;
    double hi = 1.0;
    std::vector<std::uint64_t> id_counts;
    std::vector<std::uint64_t> ood_counts;

    BinnedPool(double lo_, double hi_, std::size_t bins) : lo(lo_), hi(hi_), id_counts(bins), ood_counts(bins) {
        if (bins == 0) throw UsageError("histogram needs at least one bin");
        if (!(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi)) throw DataError("histogram range is invalid");
    }

    std::size_t bins() const { return id_counts.size(); }
    double width() const { return (hi - lo) / static_cast<double>(bins()); }
    double edge(std::size_t b) const { return lo + width() * static_cast<double>(b); }

    std::size_t bin_of(double v) const {
        if (hi == lo) return 0;
        const double t = (v - lo) / (hi - lo) * static_cast<double>(bins());
        if (!(t > 0.0)) return 0;
        return std::min(static_cast<std::size_t>(t), bins() - 1);
    }

    void add(double v, bool ood) { (ood ? ood_counts : id_counts)[bin_of(v)] += 1; }

    std::uint64_t total_id() const { return std::accumulate(id_counts.begin(), id_counts.end(), std::uint64_t{0}); }
    std::uint64_t total_ood() const { return std::accumulate(ood_counts.begin(), ood_counts.end(), std::uint64_t{0}); }

    static BinnedPool from_pool(const ScorePool& pool, std::size_t bins) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const auto* side : {&pool.id_scores, &pool.ood_scores})
            for (double v : *side) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        if (lo > hi) lo = hi = 0.0;
        BinnedPool b(lo, hi, bins);
        for (double v : pool.id_scores) b.add(v, false);
        for (double v : pool.ood_scores) b.add(v, true);
        return b;
    }
};

/// Approximate ROC: all scores within a bin are treated as tied.
inline RocCurve roc_curve_binned(const BinnedPool& b) {
    const double n_id = static_cast<double>(b.total_id());
    const double n_ood = static_cast<double>(b.total_ood());
    if (n_id == 0 || n_ood == 0) throw DataError("roc_curve: needs both ID and OOD scores");
    RocCurve curve;
    curve.approximate = true;
    curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    for (std::size_t k = b.bins(); k-- > 0;) {
        if (b.id_counts[k] == 0 && b.ood_counts[k] == 0) continue;
        tp += b.ood_counts[k];
        fp += b.id_counts[k];
        curve.points.push_back({static_cast<double>(fp) / n_id, static_cast<double>(tp) / n_ood, b.edge(k)});
    }
    curve.auroc = trapezoid_area(curve);
    return curve;
}

inline constexpr std::size_t kApproxBins = 1u << 16;

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
    std::string method;
    std::string condition;  // "all" for the global row
    std::uint64_t num_id = 0;
    std::uint64_t num_ood = 0;
    std::optional<double> auroc;
    std::optional<double> id_mean;
    std::optional<double> ood_mean;
    std::optional<double> fpr95;
    std::optional<double> fpr98;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<std::string> warnings;
    bool approximate = false;
    std::size_t ensemble_size = 1;
};

struct EvalOptions {
    std::size_t approx_bins = 0;  // 0 = exact sorting
};

inline RocCurve curve_for(const ScorePool& pool, const EvalOptions& opts) {
    return opts.approx_bins ? roc_curve_binned(BinnedPool::from_pool(pool, opts.approx_bins)) : roc_curve(pool);
}

/// Metrics for one pool; an empty side yields null metrics instead of an error.
inline EvalRow evaluate_pool(const ScorePool& pool, const EvalOptions& opts = {}) {
    EvalRow row;
    row.method = pool.method;
    row.condition = pool.condition.empty() ? "all" : pool.condition;
    row.num_id = pool.id_scores.size();
    row.num_ood = pool.ood_scores.size();
    if (!pool.id_scores.empty()) row.id_mean = mean_of(pool.id_scores, "ID");
    if (!pool.ood_scores.empty()) row.ood_mean = mean_of(pool.ood_scores, "OOD");
    if (pool.id_scores.empty() || pool.ood_scores.empty()) return row;
    const RocCurve curve = curve_for(pool, opts);
    row.auroc = opts.approx_bins ? curve.auroc : auroc(pool);
    row.fpr95 = fpr_at_tpr(curve, 0.95);
    row.fpr98 = fpr_at_tpr(curve, 0.98);
    return row;
}

/// Per-method scores aligned with a list of sample indices.
struct MethodScores {
    std::string method;
    std::vector<ScoreMap> maps;
};

/// One global row plus one row per requested condition, for every method.
inline EvalReport condition_report(const DatasetManifest& manifest, std::span<const std::size_t> sample_indices,
                                   std::span<const MethodScores> methods, std::span<const RoleMask> roles,
                                   std::span<const std::string> conditions, const EvalOptions& opts = {}) {
    if (roles.size() != sample_indices.size()) throw UsageError("condition_report: roles and samples must align");
    std::set<std::string> known;
    for (const auto& s : manifest.samples) known.insert(s.condition);
    for (const auto& c : conditions)
        if (!known.count(c)) throw UsageError("condition '" + c + "' does not appear in the manifest");

    std::vector<std::string> tags;
    for (auto idx : sample_indices) tags.push_back(manifest.samples.at(idx).condition);

    EvalReport report;
    report.approximate = opts.approx_bins != 0;
    for (const auto& m : methods) {
        if (m.maps.size() != sample_indices.size())
            throw UsageError("condition_report: method '" + m.method + "' has a map count mismatch");
        std::vector<std::optional<std::string>> filters{std::nullopt};
        for (const auto& c : conditions) filters.emplace_back(c);
        for (const auto& filter : filters) {
            ScorePool pool;
            pool.method = m.method;
            if (filter) pool.condition = *filter;
            for (std::size_t s = 0; s < sample_indices.size(); ++s) {
                if (filter && tags[s] != *filter) continue;
                pool_sample(pool, m.maps[s], roles[s]);
            }
            EvalRow row = evaluate_pool(pool, opts);
            if (!row.auroc) {
                report.warnings.push_back("method '" + row.method + "', condition '" + row.condition + "': " +
                                          std::to_string(row.num_id) + " ID / " + std::to_string(row.num_ood) +
                                          " OOD pixels; metrics are null");
            }
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    nlohmann::ordered_json j;
    j["approximate"] = r.approximate;
    j["ensemble_size"] = r.ensemble_size;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : r.rows) {
        j["rows"].push_back({{"method", row.method},
                             {"condition", row.condition},
                             {"num_id", row.num_id},
                             {"num_ood", row.num_ood},
                             {"auroc", opt(row.auroc)},
                             {"id_mean", opt(row.id_mean)},
                             {"ood_mean", opt(row.ood_mean)},
                             {"fpr95", opt(row.fpr95)},
                             {"fpr98", opt(row.fpr98)}});
    }
    j["warnings"] = r.warnings;
    return j;
}

inline std::string format_report_table(const EvalReport& r) {
    auto cell = [](const std::optional<double>& v) {
        char buf[32];
        if (v) std::snprintf(buf, sizeof buf, "%10.4f", *v);
        else std::snprintf(buf, sizeof buf, "%10s", "null");
        return std::string(buf);
    };
    std::ostringstream out;
    char head[160];
    std::snprintf(head, sizeof head, "%-10s %-14s %10s %10s %10s %10s %10s\n", "method", "condition", "AUROC",
                  "ID mean", "OOD mean", "FPR95", "FPR98");
    out << head;
    for (const auto& row : r.rows) {
        char lead[64];
        std::snprintf(lead, sizeof lead, "%-10s %-14s", row.method.c_str(), row.condition.c_str());
        out << lead << ' ' << cell(row.auroc) << ' ' << cell(row.id_mean) << ' ' << cell(row.ood_mean) << ' '
            << cell(row.fpr95) << ' ' << cell(row.fpr98) << '\n';
    }
    if (r.approximate) out << "(approximate: " << kApproxBins << "-bin histogram metrics)\n";
    return out.str();
}

inline std::string roc_to_csv(const RocCurve& curve) {
    std::ostringstream out;
    out << "threshold,fpr,tpr\n";
    char buf[96];
    for (const auto& p : curve.points) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.fpr, p.tpr);
        out << buf;
    }
    return out.str();
}

/// ID vs OOD score distribution over the pooled range.
inline std::string histogram_to_csv(const ScorePool& pool, std::size_t bins = 100) {
    const BinnedPool b = BinnedPool::from_pool(pool, bins);
    const double n_id = static_cast<double>(std::max<std::uint64_t>(b.total_id(), 1));
    const double n_ood = static_cast<double>(std::max<std::uint64_t>(b.total_ood(), 1));
    std::ostringstream out;
    out << "bin_lo,bin_hi,id_count,ood_count,id_fraction,ood_fraction\n";
    char buf[160];
    for (std::size_t k = 0; k < b.bins(); ++k) {
        const double hi = k + 1 == b.bins() ? b.hi : b.edge(k + 1);
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%llu,%llu,%.17g,%.17g\n", b.edge(k), hi,
                      static_cast<unsigned long long>(b.id_counts[k]), static_cast<unsigned long long>(b.ood_counts[k]),
                      static_cast<double>(b.id_counts[k]) / n_id, static_cast<double>(b.ood_counts[k]) / n_ood);
        out << buf;
    }
    return out.str();
}

}  // namespace neco
