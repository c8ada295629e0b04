#pragma once

// Validation-fitted standardization of the geometric and energy scores and
// their convex fusion into a single OOD-oriented map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "neco/dataset.hpp"
#include "neco/error.hpp"
#include "neco/geometry.hpp"
#include "neco/json_util.hpp"
#include "neco/logit_scores.hpp"
#include "neco/score_map.hpp"

namespace neco {

inline constexpr double kStdFloor = 1e-8;

/// Count / mean / sum of squared deviations, merged with Chan's update so
/// partial results over disjoint pixel sets combine associatively.
struct ScoreMoments {
    std::uint64_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        ++count;
        const double delta = x - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (x - mean);
    }

    void merge(const ScoreMoments& o) {
        if (o.count == 0) return;
        if (count == 0) {
            *this = o;
            return;
        }
        const double n = static_cast<double>(count + o.count);
        const double delta = o.mean - mean;
        mean += delta * static_cast<double>(o.count) / n;
        m2 += o.m2 + delta * delta * static_cast<double>(count) * static_cast<double>(o.count) / n;
        count += o.count;
    }

    /// Population (1/N) standard deviation.
    double population_std() const { return count ? std::sqrt(std::max(m2, 0.0) / static_cast<double>(count)) : 0.0; }
};

struct NormalizerStats {
    double neco_mean = 0.0;
    double neco_std = 1.0;
    double energy_mean = 0.0;
    double energy_std = 1.0;
    std::uint64_t num_pixels = 0;
    std::string manifest_hash;
};

struct FusionConfig {
    double alpha = 0.6;
};

inline void check_std(double std, const char* what) {
    if (!(std >= kStdFloor) || !std::isfinite(std))
        throw NumericError(std::string("degenerate ") + what + " distribution: std " + exact_decimal(std) +
                           " below floor " + exact_decimal(kStdFloor));
}

inline NormalizerStats normalizer_from_moments(const ScoreMoments& neco, const ScoreMoments& energy) {
    if (neco.count == 0 || energy.count == 0) throw DataError("normalizer fit: no ID pixels in the validation split");
    NormalizerStats s;
    s.neco_mean = neco.mean;
    s.neco_std = neco.population_std();
    s.energy_mean = energy.mean;
    s.energy_std = energy.population_std();
    s.num_pixels = neco.count;
    check_std(s.neco_std, "NECO");
    check_std(s.energy_std, "Energy");
    return s;
}

struct SampleMoments {
    ScoreMoments neco;
    ScoreMoments energy;
};

/// Raw score moments over the ID pixels of one sample.
inline SampleMoments sample_moments(const ScoreMap& neco, const ScoreMap& energy, const RoleMask& roles) {
    if (!neco.same_shape(energy) || neco.size() != roles.size())
        throw DataError("normalizer fit: score map and role mask shapes differ");
    SampleMoments m;
    for (std::size_t i = 0; i < roles.size(); ++i) {
        if (roles.role(i) != PixelRole::id) continue;
        m.neco.add(neco.values[i]);
        m.energy.add(energy.values[i]);
    }
    return m;
}

/// Fits NECO/Energy standardizers on the ID pixels of the val_id split.
/// Samples are visited in id order so the result is reproducible bit for bit.
inline NormalizerStats fit_normalizer(const DatasetManifest& manifest, const GeometryStats& geometry,
                                      const EnergyConfig& energy_cfg, const ArrayReader& reader = default_reader) {
    auto indices = manifest.indices_of(Split::val_id);
    if (indices.empty()) throw DataError("split val_id is empty; nothing to fit the normalizer on");
    std::sort(indices.begin(), indices.end(),
              [&](auto a, auto b) { return manifest.samples[a].id < manifest.samples[b].id; });
    SampleMoments total;
    for (auto idx : indices) {
        const DenseSample s = load_sample(manifest, idx, reader);
        const RoleMask roles = remap_labels(s.labels, manifest.num_classes, manifest.ignore_label);
        const auto m = sample_moments(neco_map(s, geometry), energy_map(s.logits, energy_cfg), roles);
        total.neco.merge(m.neco);
        total.energy.merge(m.energy);
    }
    NormalizerStats stats = normalizer_from_moments(total.neco, total.energy);
    stats.manifest_hash = manifest.content_hash;
    return stats;
}

inline double standardize(double value, double mean, double std) {
    check_std(std, "score");
    return (value - mean) / std;
}

/// -(value - mean) / std per pixel: an ID-oriented raw score turned into an
/// OOD-oriented standardized one.
inline ScoreMap negate_standardized(const ScoreMap& score, double mean, double std) {
    require_orientation(score, Orientation::higher_means_id, "negate_standardized");
    check_std(std, "score");
    ScoreMap out = score;
    out.orientation = Orientation::higher_means_ood;
    for (auto& v : out.values) v = -((v - mean) / std);
    return out;
}

/// -(alpha * Z_neco + (1 - alpha) * Z_energy); higher means OOD.
inline ScoreMap hybrid_map(const ScoreMap& neco, const ScoreMap& energy, const NormalizerStats& norm,
                           const FusionConfig& cfg = {}) {
    require_orientation(neco, Orientation::higher_means_id, "hybrid_map (NECO input)");
    require_orientation(energy, Orientation::higher_means_id, "hybrid_map (Energy input)");
    if (!neco.same_shape(energy)) throw DataError("hybrid_map: NECO and Energy maps differ in shape");
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw UsageError("alpha must lie in [0, 1]");
    check_std(norm.neco_std, "NECO");
    check_std(norm.energy_std, "Energy");

    ScoreMap out(neco.height, neco.width, Orientation::higher_means_ood);
    if (!neco.valid.empty() || !energy.valid.empty()) {
        out.valid.assign(out.size(), 1);
        for (std::size_t i = 0; i < out.size(); ++i) out.valid[i] = neco.is_valid(i) && energy.is_valid(i);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double zn = (neco.values[i] - norm.neco_mean) / norm.neco_std;
        const double ze = (energy.values[i] - norm.energy_mean) / norm.energy_std;
        out.values[i] = -(cfg.alpha * zn + (1.0 - cfg.alpha) * ze);
    }
    return out;
}

inline nlohmann::ordered_json normalizer_to_json(const NormalizerStats& s) {
    nlohmann::ordered_json j;
    j["neco_mean"] = exact_decimal(s.neco_mean);
    j["neco_std"] = exact_decimal(s.neco_std);
    j["energy_mean"] = exact_decimal(s.energy_mean);
    j["energy_std"] = exact_decimal(s.energy_std);
    j["fit_meta"]["num_pixels"] = s.num_pixels;
    j["fit_meta"]["manifest_hash"] = s.manifest_hash;
    return j;
}

inline NormalizerStats normalizer_from_json(const nlohmann::json& j) {
    try {
        NormalizerStats s;
        s.neco_mean = parse_decimal(j.at("neco_mean"), "neco_mean");
        s.neco_std = parse_decimal(j.at("neco_std"), "neco_std");
        s.energy_mean = parse_decimal(j.at("energy_mean"), "energy_mean");
        s.energy_std = parse_decimal(j.at("energy_std"), "energy_std");
        s.num_pixels = j.at("fit_meta").at("num_pixels").get<std::uint64_t>();
        s.manifest_hash = j.at("fit_meta").at("manifest_hash").get<std::string>();
        check_std(s.neco_std, "NECO");
        check_std(s.energy_std, "Energy");
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("normalizer stats: ") + e.what());
    }
}

}  // namespace neco
