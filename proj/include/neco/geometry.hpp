#pragma once

// In-distribution feature geometry: streaming mean, subsampled truncated PCA,
// and the centered projection-ratio (NECO) score map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include "neco/dataset.hpp"
#include "neco/error.hpp"
#include "neco/json_util.hpp"
#include "neco/random.hpp"
#include "neco/score_map.hpp"

namespace neco {

struct GeometryFitMeta {
    std::uint64_t num_pixels_used = 0;  // ID pixels feeding the mean
    std::uint64_t num_buffered = 0;     // rows feeding the SVD
    std::uint64_t subsample_seed = 0;
    std::uint64_t subsample_cap = 0;
    double variance_threshold = 0.95;
    std::optional<int> k_override;
    std::string feature_layer;
};

struct GeometryStats {
    Eigen::VectorXd mean;                // d
    Eigen::MatrixXd basis;               // d x k, orthonormal columns
    double epsilon = 1e-12;
    Eigen::VectorXd explained_variance;  // k, nonincreasing
    double total_variance = 0.0;
    GeometryFitMeta fit_meta;

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
    std::size_t rank() const { return static_cast<std::size_t>(basis.cols()); }
};

/// Streaming feature statistics: exact float64 sum over every ID pixel plus a
/// bounded per-image subsample of rows for the SVD.
class FeatureAccumulator {
public:
    FeatureAccumulator() = default;
    explicit FeatureAccumulator(std::size_t dim) : dim_(dim), sum_(dim, 0.0) {}

    std::size_t dim() const noexcept { return dim_; }
    std::uint64_t count() const noexcept { return count_; }
    const std::vector<double>& sum() const noexcept { return sum_; }
    std::size_t buffered_rows() const noexcept { return dim_ ? buffer_.size() / dim_ : 0; }
    const std::vector<double>& buffer() const noexcept { return buffer_; }

    void add_row(std::span<const double> row, bool buffered) {
        ensure_dim(row.size());
        for (std::size_t j = 0; j < dim_; ++j) sum_[j] += row[j];
        ++count_;
        if (buffered) buffer_.insert(buffer_.end(), row.begin(), row.end());
    }

    /// Appends `other` after this accumulator's contents.
    void merge(const FeatureAccumulator& other) {
        if (other.dim_ == 0) return;
        ensure_dim(other.dim_);
        for (std::size_t j = 0; j < dim_; ++j) sum_[j] += other.sum_[j];
        count_ += other.count_;
        buffer_.insert(buffer_.end(), other.buffer_.begin(), other.buffer_.end());
    }

    friend bool operator==(const FeatureAccumulator&, const FeatureAccumulator&) = default;

private:
    void ensure_dim(std::size_t d) {
        if (dim_ == 0 && count_ == 0) {
            dim_ = d;
            sum_.assign(d, 0.0);
        } else if (d != dim_) {
            throw DataError("feature dimension " + std::to_string(d) + " does not match accumulator dimension " +
                            std::to_string(dim_));
        }
    }

    std::size_t dim_ = 0;
    std::uint64_t count_ = 0;
    std::vector<double> sum_;
    std::vector<double> buffer_;  // row-major, buffered_rows() x dim
};

namespace geometry_detail {

template <typename F>
void for_each_feature_row(const Tensor& features, F&& fn) {
    const std::size_t d = features.dim(2);
    const std::size_t n = features.dim(0) * features.dim(1);
    std::vector<double> row(d);
    auto run = [&](auto values) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<double>(values[i * d + j]);
            fn(i, std::span<const double>(row));
        }
    };
    if (features.dtype() == DType::float32) run(features.values<float>());
    else run(features.values<double>());
}

}  // namespace geometry_detail

/// Adds the ID pixels of a validation sample. Every ID pixel enters the mean;
/// at most `per_image_cap` of them, drawn uniformly with `seed`, enter the SVD buffer.
inline FeatureAccumulator accumulate_features(FeatureAccumulator acc, const DenseSample& sample, const RoleMask& roles,
                                              std::size_t per_image_cap, std::uint64_t seed) {
    if (sample.split != Split::val_id)
        throw UsageError("sample '" + sample.id + "' is in split " + split_name(sample.split) +
                         "; geometry is fitted on val_id only");
    if (roles.height() != sample.height() || roles.width() != sample.width())
        throw DataError("sample '" + sample.id + "': role mask shape does not match features");
    if (per_image_cap == 0) throw UsageError("per-image subsample cap must be positive");

    std::vector<std::size_t> id_pixels;
    for (std::size_t i = 0; i < roles.size(); ++i)
        if (roles.role(i) == PixelRole::id) id_pixels.push_back(i);
    if (id_pixels.empty()) return acc;

    std::vector<std::uint8_t> chosen(roles.size(), 0);
    if (id_pixels.size() <= per_image_cap) {
        for (auto i : id_pixels) chosen[i] = 1;
    } else {
        Rng rng(seed);
        for (std::size_t j = 0; j < per_image_cap; ++j) {
            const auto pick = j + rng.below(id_pixels.size() - j);
            std::swap(id_pixels[j], id_pixels[pick]);
            chosen[id_pixels[j]] = 1;
        }
    }

    FeatureAccumulator local(sample.feature_dim());
    geometry_detail::for_each_feature_row(sample.features, [&](std::size_t i, std::span<const double> row) {
        if (roles.role(i) == PixelRole::id) local.add_row(row, chosen[i] != 0);
    });
    acc.merge(local);
    return acc;
}

/// Mean over all accumulated pixels and the top-k right singular directions of
/// the mean-centered buffer. k is the smallest count reaching `variance_threshold`
/// of the buffer variance unless `k_override` is given.
inline GeometryStats fit_geometry(const FeatureAccumulator& acc, double variance_threshold,
                                  std::optional<int> k_override = std::nullopt, double epsilon = 1e-12) {
    if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
        throw UsageError("variance threshold must lie in (0, 1]");
    if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
    if (acc.count() < 2) throw DataError("geometry fit needs at least 2 ID pixels, got " + std::to_string(acc.count()));
    const auto n = static_cast<Eigen::Index>(acc.buffered_rows());
    const auto d = static_cast<Eigen::Index>(acc.dim());
    if (n == 0) throw DataError("geometry fit: subsample buffer is empty");
    if (k_override && (*k_override < 1 || *k_override > d))
        throw UsageError("PCA dimension " + std::to_string(*k_override) + " outside [1, " + std::to_string(d) + "]");

    GeometryStats stats;
    stats.epsilon = epsilon;
    stats.mean = Eigen::Map<const Eigen::VectorXd>(acc.sum().data(), d) / static_cast<double>(acc.count());

    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> rows(acc.buffer().data(), n,
                                                                                                   d);
    if (n < 2 || ((rows.rowwise() - rows.row(0)).cwiseAbs().maxCoeff() == 0.0))
        throw NumericError("degenerate feature buffer: all buffered rows are identical (zero variance)");

    Eigen::MatrixXd centered = rows.rowwise() - stats.mean.transpose();
    const double total = centered.squaredNorm() / static_cast<double>(n);
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericError("degenerate feature buffer: zero total variance");

    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeFullV);
    const Eigen::VectorXd sv = svd.singularValues();
    Eigen::VectorXd variance = Eigen::VectorXd::Zero(d);
    variance.head(sv.size()) = sv.array().square() / static_cast<double>(n);

    Eigen::Index k = d;
    if (k_override) {
        k = *k_override;
    } else {
        // Relative slack absorbs rounding in the cumulative sum so a threshold of
        // exactly 1 stops at the numerical rank.
        double cumulative = 0.0;
        for (Eigen::Index i = 0; i < d; ++i) {
            cumulative += variance[i];
            if (cumulative / total >= variance_threshold - 1e-12) {
                k = i + 1;
                break;
            }
        }
    }

    stats.basis = svd.matrixV().leftCols(k);
    for (Eigen::Index c = 0; c < k; ++c) {
        Eigen::Index arg = 0;
        stats.basis.col(c).cwiseAbs().maxCoeff(&arg);
        if (stats.basis(arg, c) < 0) stats.basis.col(c) *= -1.0;
    }
    stats.explained_variance = variance.head(k);
    stats.total_variance = total;
    stats.fit_meta.num_pixels_used = acc.count();
    stats.fit_meta.num_buffered = static_cast<std::uint64_t>(n);
    stats.fit_meta.variance_threshold = variance_threshold;
    stats.fit_meta.k_override = k_override;
    return stats;
}

/// Per-pixel ||P^T (h - mu)|| / (||h - mu|| + eps); higher means ID-like.
inline ScoreMap neco_map(const DenseSample& sample, const GeometryStats& stats) {
    const auto d = static_cast<Eigen::Index>(sample.feature_dim());
    if (d != static_cast<Eigen::Index>(stats.dim()))
        throw DataError("sample '" + sample.id + "': feature depth " + std::to_string(d) +
                        " does not match fitted dimension " + std::to_string(stats.dim()));

    ScoreMap out(sample.height(), sample.width(), Orientation::higher_means_id);
    const auto n = static_cast<Eigen::Index>(sample.pixels());
    constexpr Eigen::Index kChunk = 4096;
    const double below_one = std::nextafter(1.0, 0.0);
    const Eigen::RowVectorXd mean_row = stats.mean.transpose();

    auto run = [&](auto values) {
        using T = typename decltype(values)::element_type;
        using RowMajor = Eigen::Matrix<std::remove_const_t<T>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::MatrixXd centered;
        Eigen::MatrixXd projected;
        for (Eigen::Index start = 0; start < n; start += kChunk) {
            const Eigen::Index rows = std::min(kChunk, n - start);
            Eigen::Map<const RowMajor> block(values.data() + start * d, rows, d);
            centered = block.template cast<double>().rowwise() - mean_row;
            projected.noalias() = centered * stats.basis;
            for (Eigen::Index r = 0; r < rows; ++r) {
                const double ratio = projected.row(r).norm() / (centered.row(r).norm() + stats.epsilon);
                // ||P^T v|| <= ||v|| holds exactly; clamp rounding so the score stays in [0, 1).
                out.values[static_cast<std::size_t>(start + r)] = std::min(ratio, below_one);
            }
        }
    };
    if (sample.features.dtype() == DType::float32) run(sample.features.values<float>());
    else run(sample.features.values<double>());
    return out;
}

inline nlohmann::ordered_json geometry_to_json(const GeometryStats& s) {
    nlohmann::ordered_json j;
    j["dim"] = s.dim();
    j["rank"] = s.rank();
    j["epsilon"] = exact_decimal(s.epsilon);
    j["total_variance"] = exact_decimal(s.total_variance);
    auto& mean = j["mean"] = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < s.mean.size(); ++i) mean.push_back(exact_decimal(s.mean[i]));
    auto& basis = j["basis"] = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < s.basis.rows(); ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (Eigen::Index c = 0; c < s.basis.cols(); ++c) row.push_back(exact_decimal(s.basis(r, c)));
        basis.push_back(std::move(row));
    }
    auto& ev = j["explained_variance"] = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < s.explained_variance.size(); ++i) ev.push_back(exact_decimal(s.explained_variance[i]));
    auto& meta = j["fit_meta"];
    meta["num_pixels_used"] = s.fit_meta.num_pixels_used;
    meta["num_buffered"] = s.fit_meta.num_buffered;
    meta["subsample_seed"] = s.fit_meta.subsample_seed;
    meta["subsample_cap"] = s.fit_meta.subsample_cap;
    meta["variance_threshold"] = exact_decimal(s.fit_meta.variance_threshold);
    meta["k_override"] = s.fit_meta.k_override ? nlohmann::ordered_json(*s.fit_meta.k_override) : nullptr;
    meta["feature_layer"] = s.fit_meta.feature_layer;
    return j;
}

inline GeometryStats geometry_from_json(const nlohmann::json& j) {
    try {
        GeometryStats s;
        const auto d = j.at("dim").get<Eigen::Index>();
        const auto k = j.at("rank").get<Eigen::Index>();
        s.epsilon = parse_decimal(j.at("epsilon"), "epsilon");
        s.total_variance = parse_decimal(j.at("total_variance"), "total_variance");
        const auto& mean = j.at("mean");
        const auto& basis = j.at("basis");
        const auto& ev = j.at("explained_variance");
        if (static_cast<Eigen::Index>(mean.size()) != d || static_cast<Eigen::Index>(basis.size()) != d ||
            static_cast<Eigen::Index>(ev.size()) != k || k < 1 || k > d)
            throw DataError("geometry stats: inconsistent dim/rank");
        s.mean.resize(d);
        s.basis.resize(d, k);
        s.explained_variance.resize(k);
        for (Eigen::Index i = 0; i < d; ++i) {
            s.mean[i] = parse_decimal(mean[i], "mean");
            if (static_cast<Eigen::Index>(basis[i].size()) != k) throw DataError("geometry stats: ragged basis");
            for (Eigen::Index c = 0; c < k; ++c) s.basis(i, c) = parse_decimal(basis[i][c], "basis");
        }
        for (Eigen::Index i = 0; i < k; ++i) s.explained_variance[i] = parse_decimal(ev[i], "explained_variance");
        const auto& meta = j.at("fit_meta");
        s.fit_meta.num_pixels_used = meta.at("num_pixels_used").get<std::uint64_t>();
        s.fit_meta.num_buffered = meta.at("num_buffered").get<std::uint64_t>();
        s.fit_meta.subsample_seed = meta.at("subsample_seed").get<std::uint64_t>();
        s.fit_meta.subsample_cap = meta.at("subsample_cap").get<std::uint64_t>();
        s.fit_meta.variance_threshold = parse_decimal(meta.at("variance_threshold"), "variance_threshold");
        if (!meta.at("k_override").is_null()) s.fit_meta.k_override = meta.at("k_override").get<int>();
        s.fit_meta.feature_layer = meta.at("feature_layer").get<std::string>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("geometry stats: ") + e.what());
    }
}

}  // namespace neco
