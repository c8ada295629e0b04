#pragma once

// Synthetic neural-collapse benchmark: simplex-ETF class means, a self-dual
// linear classifier, and two anomaly regimes. Type A leaves the class-mean
// subspace (geometry sees it, logits do not); type B is an ID-like feature
// shrunk toward the simplex centroid (same direction profile, weak logits).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "neco/dataset.hpp"
#include "neco/error.hpp"
#include "neco/parallel.hpp"
#include "neco/random.hpp"
#include "neco/tensor.hpp"

namespace neco {

struct SynthConfig {
    int num_classes = 8;
    int feature_dim = 32;
    std::size_t height = 64;
    std::size_t width = 128;
    std::size_t num_val_images = 8;
    std::size_t num_test_images = 8;
    double within_class_noise = 0.1;
    double ood_fraction = 0.1;      // per test image
    double anomaly_mix = 0.5;       // fraction of OOD pixels that are type A
    double anomaly_offset = 3.0;    // norm of the off-subspace displacement (type A)
    double centroid_shrink = 0.15;  // scale toward the centroid (type B)
    double logit_scale = 10.0;
    std::uint64_t seed = 7;
    std::vector<std::string> conditions{"low_light", "high_light", "low_contrast", "high_contrast"};
};

inline void validate(const SynthConfig& c) {
    if (c.num_classes < 2) throw UsageError("synth: need at least 2 classes");
    if (c.num_classes > 254) throw UsageError("synth: uint8 labels support at most 254 classes");
    if (c.feature_dim < c.num_classes) throw UsageError("synth: feature_dim must be >= num_classes");
    if (c.height == 0 || c.width == 0) throw UsageError("synth: image size must be positive");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(c.ood_fraction) || !unit(c.anomaly_mix) || !unit(c.centroid_shrink))
        throw UsageError("synth: fractions must lie in [0, 1]");
    if (!(c.within_class_noise >= 0.0) || !(c.logit_scale > 0.0) || !(c.anomaly_offset >= 0.0))
        throw UsageError("synth: noise, offset and logit scale must be nonnegative (scale positive)");
    if (c.conditions.empty()) throw UsageError("synth: need at least one condition tag");
}

/// K x d simplex equiangular tight frame: unit rows, pairwise inner products
/// -1/(K-1), spanning a (K-1)-dimensional subspace.
inline Eigen::MatrixXd make_etf(int num_classes, int dim) {
    if (num_classes < 2) throw UsageError("ETF needs at least 2 classes");
    if (dim < num_classes) throw UsageError("ETF needs dim >= num_classes (" + std::to_string(dim) + " < " +
                                            std::to_string(num_classes) + ")");
    const double k = num_classes;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(num_classes, dim);
    m.leftCols(num_classes) = (Eigen::MatrixXd::Identity(num_classes, num_classes) -
                               Eigen::MatrixXd::Constant(num_classes, num_classes, 1.0 / k)) *
                              std::sqrt(k / (k - 1.0));
    return m;
}

namespace synth_detail {

struct ImageArrays {
    Tensor features;
    Tensor logits;
    Tensor labels;
};

inline ImageArrays generate_image(const SynthConfig& cfg, const Eigen::MatrixXd& means, const Eigen::MatrixXd& span_proj,
                                  bool test, std::size_t index) {
    const auto d = static_cast<Eigen::Index>(cfg.feature_dim);
    const auto k = static_cast<Eigen::Index>(cfg.num_classes);
    const std::size_t n = cfg.height * cfg.width;
    Rng rng(derive_seed(cfg.seed, {test ? 2u : 1u, index}));

    // 0 = ID, 1 = type A, 2 = type B
    std::vector<std::uint8_t> kind(n, 0);
    if (test) {
        const auto n_ood = static_cast<std::size_t>(std::llround(cfg.ood_fraction * static_cast<double>(n)));
        const auto n_a = static_cast<std::size_t>(std::llround(cfg.anomaly_mix * static_cast<double>(n_ood)));
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t j = 0; j < n_ood; ++j) {
            std::swap(order[j], order[j + rng.below(n - j)]);
            kind[order[j]] = j < n_a ? 1 : 2;
        }
    }

    std::vector<float> features(n * static_cast<std::size_t>(d));
    std::vector<float> logits(n * static_cast<std::size_t>(k));
    std::vector<std::uint8_t> labels(n);
    Eigen::VectorXd h(d);
    Eigen::VectorXd g(d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(k)));
        for (Eigen::Index j = 0; j < d; ++j) h[j] = means(c, j) + cfg.within_class_noise * rng.normal();
        if (kind[i] == 1) {
            double norm = 0.0;
            do {
                for (Eigen::Index j = 0; j < d; ++j) g[j] = rng.normal();
                g -= span_proj * g;
                norm = g.norm();
            } while (norm < 1e-6);
            h += (cfg.anomaly_offset / norm) * g;
        } else if (kind[i] == 2) {
            h *= cfg.centroid_shrink;
        }
        labels[i] = kind[i] ? static_cast<std::uint8_t>(k) : static_cast<std::uint8_t>(c);

        // Logits from the stored (float32) feature so on-disk arrays agree exactly.
        for (Eigen::Index j = 0; j < d; ++j) {
            const float f = static_cast<float>(h[j]);
            features[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = f;
            h[j] = f;
        }
        const Eigen::VectorXd z = cfg.logit_scale * (means * h);
        for (Eigen::Index j = 0; j < k; ++j)
            logits[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] = static_cast<float>(z[j]);
    }
    return {Tensor(Shape{cfg.height, cfg.width, static_cast<std::size_t>(d)}, std::move(features)),
            Tensor(Shape{cfg.height, cfg.width, static_cast<std::size_t>(k)}, std::move(logits)),
            Tensor(Shape{cfg.height, cfg.width}, std::move(labels))};
}

}  // namespace synth_detail

/// Writes manifest.json plus features/, logits/, labels/ NPY files under `out_dir`.
/// Output bytes depend only on the config.
inline DatasetManifest generate_benchmark(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                          std::size_t jobs = 1) {
    validate(cfg);
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"features", "logits", "labels"}) {
        fs::create_directories(out_dir / sub, ec);
        if (ec) throw DataError("synth: cannot create " + (out_dir / sub).string() + ": " + ec.message());
    }

    const Eigen::MatrixXd means = make_etf(cfg.num_classes, cfg.feature_dim);
    // Orthogonal projector onto span(means); (M M^T)^+ = ((K-1)/K)(I - J/K) and M^T J M = 0.
    const double kk = cfg.num_classes;
    const Eigen::MatrixXd span_proj = ((kk - 1.0) / kk) * means.transpose() * means;

    DatasetManifest manifest;
    manifest.num_classes = cfg.num_classes;
    manifest.feature_layer = "synthetic_etf";
    manifest.root = out_dir;

    struct Job {
        bool test;
        std::size_t index;
    };
    std::vector<Job> work;
    for (std::size_t i = 0; i < cfg.num_val_images; ++i) work.push_back({false, i});
    for (std::size_t i = 0; i < cfg.num_test_images; ++i) work.push_back({true, i});

    for (const auto& w : work) {
        char id[32];
        std::snprintf(id, sizeof id, "%s_%03zu", w.test ? "test" : "val", w.index);
        SampleEntry e;
        e.id = id;
        e.feature_path = "features/" + e.id + ".npy";
        e.logit_path = "logits/" + e.id + ".npy";
        e.label_path = "labels/" + e.id + ".npy";
        e.condition = cfg.conditions[w.index % cfg.conditions.size()];
        e.split = w.test ? Split::test : Split::val_id;
        manifest.samples.push_back(std::move(e));
    }

    parallel_for(work.size(), jobs, [&](std::size_t j) {
        const auto arrays = synth_detail::generate_image(cfg, means, span_proj, work[j].test, work[j].index);
        const auto& e = manifest.samples[j];
        write_array(out_dir / e.feature_path, arrays.features);
        write_array(out_dir / e.logit_path, arrays.logits);
        write_array(out_dir / e.label_path, arrays.labels);
    });

    save_manifest(out_dir / "manifest.json", manifest);
    return load_manifest(out_dir / "manifest.json");
}

}  // namespace neco
