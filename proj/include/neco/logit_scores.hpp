#pragma once

// Logit-space scores: temperature-scaled log-sum-exp energy, softmax,
// ensemble-averaged probabilities and predictive entropy.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "neco/error.hpp"
#include "neco/score_map.hpp"
#include "neco/tensor.hpp"

namespace neco {

struct EnergyConfig {
    double temperature = 1.0;
};

/// H x W x C probabilities.
struct ProbMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t classes = 0;
    std::vector<double> probs;

    std::span<const double> pixel(std::size_t i) const { return std::span(probs).subspan(i * classes, classes); }
};

namespace logit_detail {

inline void check_logits(const Tensor& logits) {
    if (logits.rank() != 3) throw DataError("logits must be HxWxC, got " + shape_string(logits.shape()));
    if (logits.dim(2) == 0) throw DataError("logits need at least one class");
    if (logits.dtype() != DType::float32 && logits.dtype() != DType::float64)
        throw DataError("logits must be float32 or float64");
}

inline void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw UsageError("temperature must be positive and finite");
}

/// Calls fn(pixel, logits-as-double) for every pixel; rejects non-finite values.
template <typename F>
void for_each_pixel(const Tensor& logits, F&& fn) {
    const std::size_t c = logits.dim(2);
    const std::size_t n = logits.dim(0) * logits.dim(1);
    std::vector<double> z(c);
    auto run = [&](auto values) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                z[j] = static_cast<double>(values[i * c + j]);
                if (!std::isfinite(z[j]))
                    throw NumericError("non-finite logit at pixel " + std::to_string(i) + ", class " + std::to_string(j));
            }
            fn(i, std::span<const double>(z));
        }
    };
    if (logits.dtype() == DType::float32) run(logits.values<float>());
    else run(logits.values<double>());
}

}  // namespace logit_detail

/// T * log sum_c exp(z_c / T), max-shifted.
inline double energy(std::span<const double> z, double temperature) {
    const double m = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double v : z) acc += std::exp((v - m) / temperature);
    return m + temperature * std::log(acc);
}

inline ScoreMap energy_map(const Tensor& logits, const EnergyConfig& cfg = {}) {
    logit_detail::check_logits(logits);
    logit_detail::check_temperature(cfg.temperature);
    ScoreMap out(logits.dim(0), logits.dim(1), Orientation::higher_means_id);
    logit_detail::for_each_pixel(logits, [&](std::size_t i, std::span<const double> z) {
        out.values[i] = energy(z, cfg.temperature);
    });
    return out;
}

inline ProbMap softmax_probs(const Tensor& logits, double temperature = 1.0) {
    logit_detail::check_logits(logits);
    logit_detail::check_temperature(temperature);
    ProbMap out{logits.dim(0), logits.dim(1), logits.dim(2), std::vector<double>(logits.size())};
    const std::size_t c = out.classes;
    logit_detail::for_each_pixel(logits, [&](std::size_t i, std::span<const double> z) {
        const double m = *std::max_element(z.begin(), z.end());
        double* p = out.probs.data() + i * c;
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += p[j] = std::exp((z[j] - m) / temperature);
        for (std::size_t j = 0; j < c; ++j) p[j] /= total;
    });
    return out;
}

/// Arithmetic mean of the members' softmax distributions.
inline ProbMap ensemble_mean_probs(std::span<const Tensor> member_logits, double temperature = 1.0) {
    if (member_logits.empty()) throw UsageError("ensemble needs at least one member");
    for (const auto& m : member_logits) {
        if (m.shape() != member_logits.front().shape())
            throw DataError("ensemble member shape " + shape_string(m.shape()) + " differs from " +
                            shape_string(member_logits.front().shape()));
    }
    ProbMap mean = softmax_probs(member_logits.front(), temperature);
    for (std::size_t k = 1; k < member_logits.size(); ++k) {
        const ProbMap p = softmax_probs(member_logits[k], temperature);
        for (std::size_t i = 0; i < mean.probs.size(); ++i) mean.probs[i] += p.probs[i];
    }
    if (member_logits.size() > 1) {
        const double inv = 1.0 / static_cast<double>(member_logits.size());
        for (auto& v : mean.probs) v *= inv;
    }
    return mean;
}

/// Shannon entropy in nats, 0 ln 0 := 0. Higher means OOD.
inline ScoreMap entropy_map(const ProbMap& probs) {
    ScoreMap out(probs.height, probs.width, Orientation::higher_means_ood);
    const std::size_t n = probs.height * probs.width;
    for (std::size_t i = 0; i < n; ++i) {
        double h = 0.0;
        for (double p : probs.pixel(i)) {
            if (!(p >= 0.0 && p <= 1.0 + 1e-5))
                throw NumericError("probability " + std::to_string(p) + " out of range at pixel " + std::to_string(i));
            if (p > 0.0) h -= p * std::log(p);
        }
        out.values[i] = std::max(h, 0.0);
    }
    return out;
}

}  // namespace neco
