#pragma once

// Timing of single-sample hybrid scoring at the deployment resolution.

#include <algorithm>
#include <chrono>
#include <vector>

#include <Eigen/Dense>

#include "neco/fusion.hpp"
#include "neco/geometry.hpp"
#include "neco/logit_scores.hpp"
#include "neco/random.hpp"

namespace neco::bench {

struct ScoringBenchmark {
    std::size_t height = 256;
    std::size_t width = 512;
    std::size_t feature_dim = 64;
    std::size_t num_classes = 19;
    std::size_t pca_dim = 16;
    int repeats = 5;
};

struct BenchmarkResult {
    double median_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;
    double checksum = 0.0;
};

/// Random features/logits and a random orthonormal basis; times NECO + Energy
/// + hybrid fusion over one sample, single-threaded.
inline BenchmarkResult run_scoring_benchmark(const ScoringBenchmark& b) {
    Rng rng(12345);
    const std::size_t n = b.height * b.width;
    std::vector<float> f(n * b.feature_dim);
    std::vector<float> z(n * b.num_classes);
    for (auto& v : f) v = static_cast<float>(rng.normal());
    for (auto& v : z) v = static_cast<float>(3.0 * rng.normal());

    DenseSample s;
    s.id = "bench";
    s.features = Tensor(Shape{b.height, b.width, b.feature_dim}, std::move(f));
    s.logits = Tensor(Shape{b.height, b.width, b.num_classes}, std::move(z));

    const auto d = static_cast<Eigen::Index>(b.feature_dim);
    Eigen::MatrixXd g(d, static_cast<Eigen::Index>(b.pca_dim));
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    GeometryStats geo;
    geo.mean = Eigen::VectorXd::Zero(d);
    geo.basis = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                Eigen::MatrixXd::Identity(d, static_cast<Eigen::Index>(b.pca_dim));
    geo.explained_variance = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(b.pca_dim));

    NormalizerStats norm;
    norm.neco_mean = 0.5;
    norm.neco_std = 0.1;
    norm.energy_mean = 5.0;
    norm.energy_std = 1.0;

    std::vector<double> ms;
    BenchmarkResult r;
    for (int i = 0; i < b.repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const ScoreMap hybrid = hybrid_map(neco_map(s, geo), energy_map(s.logits), norm);
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        r.checksum = hybrid.values[n / 2];
    }
    std::sort(ms.begin(), ms.end());
    r.median_ms = ms[ms.size() / 2];
    r.min_ms = ms.front();
    r.max_ms = ms.back();
    return r;
}

}  // namespace neco::bench
