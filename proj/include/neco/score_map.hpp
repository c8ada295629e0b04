#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "neco/error.hpp"
#include "neco/tensor.hpp"

namespace neco {

enum class Orientation { higher_means_id, higher_means_ood };

inline std::string_view orientation_name(Orientation o) {
    return o == Orientation::higher_means_id ? "higher-means-ID" : "higher-means-OOD";
}

/// H x W per-pixel scores held in float64, with a declared orientation.
struct ScoreMap {
    std::size_t height = 0;
    std::size_t width = 0;
    Orientation orientation = Orientation::higher_means_ood;
    std::vector<double> values;
    std::vector<std::uint8_t> valid;  // 1 = valid; empty means all valid

    ScoreMap() = default;
    ScoreMap(std::size_t h, std::size_t w, Orientation o) : height(h), width(w), orientation(o), values(h * w, 0.0) {}

    std::size_t size() const noexcept { return values.size(); }
    bool is_valid(std::size_t i) const { return valid.empty() || valid[i] != 0; }

    bool same_shape(const ScoreMap& other) const { return height == other.height && width == other.width; }

    /// On-disk form: float32 H x W.
    Tensor to_tensor() const {
        std::vector<float> out(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i]);
        return Tensor(Shape{height, width}, std::move(out));
    }

    static ScoreMap from_tensor(const Tensor& t, Orientation o) {
        if (t.rank() != 2) throw DataError("score map must be HxW, got " + shape_string(t.shape()));
        ScoreMap m(t.dim(0), t.dim(1), o);
        for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = t.at_double(i);
        return m;
    }
};

inline void require_orientation(const ScoreMap& m, Orientation expected, std::string_view what) {
    if (m.orientation != expected) {
        throw UsageError(std::string(what) + ": expected " + std::string(orientation_name(expected)) +
                         " map, got " + std::string(orientation_name(m.orientation)));
    }
}

}  // namespace neco
