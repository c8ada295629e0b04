#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "neco/fusion.hpp"
#include "test_util.hpp"

using namespace neco;
using neco::testing::scratch_dir;

namespace {

ScoreMap map_of(std::vector<double> v, Orientation o = Orientation::higher_means_id) {
    ScoreMap m(1, v.size(), o);
    m.values = std::move(v);
    return m;
}

ScoreMoments moments_of(const std::vector<double>& v) {
    ScoreMoments m;
    for (double x : v) m.add(x);
    return m;
}

NormalizerStats unit_norm() {
    NormalizerStats n;
    n.neco_mean = 0.0;
    n.neco_std = 1.0;
    n.energy_mean = 0.0;
    n.energy_std = 1.0;
    return n;
}

// Small on-disk dataset: val_id samples with ID, OOD and ignore pixels, plus test samples.
struct ToyDataset {
    std::filesystem::path dir;
    DatasetManifest manifest;
    GeometryStats geometry;

    static constexpr std::size_t H = 6, W = 7, D = 5, C = 4;

    ToyDataset(const std::string& name, unsigned seed) : dir(scratch_dir(name)) {
        std::mt19937 gen(seed);
        std::normal_distribution<double> nd;
        std::uniform_int_distribution<int> lab(0, 9);
        std::string samples;
        for (int i = 0; i < 5; ++i) {
            const std::string id = "s" + std::to_string(i);
            std::vector<float> f(H * W * D), z(H * W * C);
            std::vector<std::uint8_t> y(H * W);
            for (auto& v : f) v = static_cast<float>(nd(gen));
            for (auto& v : z) v = static_cast<float>(2.0 * nd(gen));
            for (auto& v : y) {
                const int r = lab(gen);
                v = r < 7 ? static_cast<std::uint8_t>(r % C) : (r < 9 ? 9 : 255);
            }
            write_array(dir / (id + "_f.npy"), Tensor(Shape{H, W, D}, f));
            write_array(dir / (id + "_z.npy"), Tensor(Shape{H, W, C}, z));
            write_array(dir / (id + "_y.npy"), Tensor(Shape{H, W}, y));
            if (i) samples += ",";
            samples += R"({"id": ")" + id + R"(", "feature_path": ")" + id + R"(_f.npy", "logit_path": ")" + id +
                       R"(_z.npy", "label_path": ")" + id + R"(_y.npy", "condition": "c", "split": ")" +
                       (i < 3 ? "val_id" : "test") + R"("})";
        }
        std::ofstream(dir / "manifest.json") << R"({"version": "1.0", "num_classes": 4, "samples": [)" << samples
                                             << "]}";
        manifest = load_manifest(dir / "manifest.json");

        FeatureAccumulator acc(D);
        for (auto idx : manifest.indices_of(Split::val_id)) {
            auto s = load_sample(manifest, idx);
            acc = accumulate_features(acc, s, remap_labels(s.labels, 4), 1000, 1);
        }
        geometry = fit_geometry(acc, 0.9, 2);
    }
};

}  // namespace

TEST(ScoreMoments, PopulationStdAnalytic) {
    auto m = moments_of({1.0, 3.0});
    EXPECT_EQ(m.mean, 2.0);
    EXPECT_EQ(m.population_std(), 1.0);
    auto n = normalizer_from_moments(moments_of({0.2, 0.4}), m);
    EXPECT_EQ(n.energy_mean, 2.0);
    EXPECT_EQ(n.energy_std, 1.0);
}

TEST(ScoreMoments, MergeMatchesSinglePass) {
    std::mt19937 gen(1);
    std::normal_distribution<double> nd(50.0, 0.01);
    std::vector<double> v(1000);
    for (auto& x : v) x = nd(gen);
    auto whole = moments_of(v);
    ScoreMoments merged;
    for (std::size_t start = 0; start < v.size(); start += 137)
        merged.merge(moments_of(std::vector<double>(v.begin() + start, v.begin() + std::min(start + 137, v.size()))));
    EXPECT_EQ(merged.count, whole.count);
    EXPECT_NEAR(merged.mean, whole.mean, 1e-12);
    EXPECT_NEAR(merged.population_std(), whole.population_std(), 1e-12);
}

TEST(FitNormalizer, ConstantNecoIsDegenerate) {
    EXPECT_THROW(normalizer_from_moments(moments_of({0.7, 0.7, 0.7}), moments_of({1.0, 2.0, 3.0})), NumericError);
    EXPECT_THROW(normalizer_from_moments(ScoreMoments{}, ScoreMoments{}), DataError);
}

TEST(FitNormalizer, UsesOnlyValidationIdPixels) {
    ToyDataset ds("fusion_fit", 3);
    const EnergyConfig ecfg{1.0};
    auto stats = fit_normalizer(ds.manifest, ds.geometry, ecfg);

    std::vector<double> neco, energy;
    for (auto idx : ds.manifest.indices_of(Split::val_id)) {
        auto s = load_sample(ds.manifest, idx);
        auto roles = remap_labels(s.labels, 4);
        auto n = neco_map(s, ds.geometry);
        auto e = energy_map(s.logits, ecfg);
        for (std::size_t i = 0; i < roles.size(); ++i) {
            if (roles.role(i) != PixelRole::id) continue;
            neco.push_back(n.values[i]);
            energy.push_back(e.values[i]);
        }
    }
    auto mean_std = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= v.size();
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::pair{m, std::sqrt(ss / v.size())};
    };
    auto [nm, ns] = mean_std(neco);
    auto [em, es] = mean_std(energy);
    EXPECT_EQ(stats.num_pixels, neco.size());
    EXPECT_NEAR(stats.neco_mean, nm, 1e-12);
    EXPECT_NEAR(stats.neco_std, ns, 1e-12);
    EXPECT_NEAR(stats.energy_mean, em, 1e-12);
    EXPECT_NEAR(stats.energy_std, es, 1e-12);
    EXPECT_EQ(stats.manifest_hash, ds.manifest.content_hash);

    // Self-standardization over the same pixels.
    ScoreMoments zn, ze;
    for (std::size_t i = 0; i < neco.size(); ++i) {
        zn.add(standardize(neco[i], stats.neco_mean, stats.neco_std));
        ze.add(standardize(energy[i], stats.energy_mean, stats.energy_std));
    }
    EXPECT_LE(std::fabs(zn.mean), 1e-6);
    EXPECT_LE(std::fabs(ze.mean), 1e-6);
    EXPECT_NEAR(zn.population_std(), 1.0, 1e-6);
    EXPECT_NEAR(ze.population_std(), 1.0, 1e-6);
}

TEST(FitNormalizer, RefitIsBitIdentical) {
    ToyDataset ds("fusion_refit", 4);
    auto a = fit_normalizer(ds.manifest, ds.geometry, {1.0});
    auto b = fit_normalizer(ds.manifest, ds.geometry, {1.0});
    EXPECT_EQ(normalizer_to_json(a).dump(), normalizer_to_json(b).dump());
}

TEST(FitNormalizer, NoLeakageFromOodOrTestPixels) {
    ToyDataset ds("fusion_leak", 5);
    const auto before = fit_normalizer(ds.manifest, ds.geometry, {1.0});

    // Remove every OOD pixel from the test split (relabel to ignore) and scramble
    // OOD / ignore pixel features in val_id.
    for (auto idx : ds.manifest.indices_of(Split::test)) {
        auto y = read_array(ds.manifest.resolve(ds.manifest.samples[idx].label_path));
        for (auto& v : y.values<std::uint8_t>())
            if (v >= 4) v = 255;
        write_array(ds.manifest.resolve(ds.manifest.samples[idx].label_path), y);
    }
    for (auto idx : ds.manifest.indices_of(Split::val_id)) {
        const auto& e = ds.manifest.samples[idx];
        auto y = read_array(ds.manifest.resolve(e.label_path));
        auto f = read_array(ds.manifest.resolve(e.feature_path));
        auto z = read_array(ds.manifest.resolve(e.logit_path));
        auto labels = y.values<std::uint8_t>();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 4) continue;
            for (std::size_t j = 0; j < ToyDataset::D; ++j) f.values<float>()[i * ToyDataset::D + j] = 1e3f;
            for (std::size_t j = 0; j < ToyDataset::C; ++j) z.values<float>()[i * ToyDataset::C + j] = -7.0f;
        }
        write_array(ds.manifest.resolve(e.feature_path), f);
        write_array(ds.manifest.resolve(e.logit_path), z);
    }
    const auto after = fit_normalizer(ds.manifest, ds.geometry, {1.0});
    EXPECT_EQ(after.neco_mean, before.neco_mean);
    EXPECT_EQ(after.neco_std, before.neco_std);
    EXPECT_EQ(after.energy_mean, before.energy_mean);
    EXPECT_EQ(after.energy_std, before.energy_std);
}

TEST(FitNormalizer, EmptyValidationSplit) {
    DatasetManifest m;
    m.num_classes = 2;
    EXPECT_THROW(fit_normalizer(m, GeometryStats{}, {1.0}), DataError);
}

TEST(Standardize, Examples) {
    EXPECT_EQ(standardize(3.0, 3.0, 2.0), 0.0);
    EXPECT_EQ(standardize(5.0, 3.0, 2.0), 1.0);
    EXPECT_EQ(standardize(-1.0, 3.0, 2.0), -2.0);
    EXPECT_THROW(standardize(1.0, 0.0, 1e-9), NumericError);
}

TEST(HybridMap, ConvexCombinationArithmetic) {
    auto out = hybrid_map(map_of({1.0}), map_of({-1.0}), unit_norm(), {0.6});
    EXPECT_EQ(out.orientation, Orientation::higher_means_ood);
    EXPECT_NEAR(out.values[0], -0.2, 1e-15);
}

TEST(HybridMap, EndpointsReproduceSingleScoreMaps) {
    std::mt19937 gen(7);
    std::normal_distribution<double> nd;
    std::vector<double> a(100), b(100);
    for (auto& x : a) x = 0.8 + 0.05 * nd(gen);
    for (auto& x : b) x = 9.0 + 1.5 * nd(gen);
    NormalizerStats norm;
    norm.neco_mean = 0.79;
    norm.neco_std = 0.051;
    norm.energy_mean = 9.2;
    norm.energy_std = 1.4;
    auto neco = map_of(a), energy = map_of(b);
    auto only_neco = hybrid_map(neco, energy, norm, {1.0});
    auto only_energy = hybrid_map(neco, energy, norm, {0.0});
    auto ref_neco = negate_standardized(neco, norm.neco_mean, norm.neco_std);
    auto ref_energy = negate_standardized(energy, norm.energy_mean, norm.energy_std);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(only_neco.values[i], ref_neco.values[i], 1e-12);
        EXPECT_NEAR(only_energy.values[i], ref_energy.values[i], 1e-12);
    }
}

TEST(HybridMap, Errors) {
    EXPECT_THROW(hybrid_map(map_of({1.0}, Orientation::higher_means_ood), map_of({1.0}), unit_norm()), UsageError);
    EXPECT_THROW(hybrid_map(map_of({1.0}), map_of({1.0, 2.0}), unit_norm()), DataError);
    EXPECT_THROW(hybrid_map(map_of({1.0}), map_of({1.0}), unit_norm(), {1.5}), UsageError);
}

TEST(NegateStandardized, Examples) {
    auto out = negate_standardized(map_of({3.0, 5.0, 1.0, 4.0}), 3.0, 2.0);
    EXPECT_EQ(out.orientation, Orientation::higher_means_ood);
    EXPECT_EQ(out.values[0], 0.0);
    EXPECT_EQ(out.values[1], -1.0);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            if (i != j) {
                const double in_i = std::vector<double>{3.0, 5.0, 1.0, 4.0}[i];
                const double in_j = std::vector<double>{3.0, 5.0, 1.0, 4.0}[j];
                EXPECT_EQ(in_i < in_j, out.values[i] > out.values[j]);
            }
    EXPECT_THROW(negate_standardized(map_of({1.0}), 0.0, 0.0), NumericError);
    EXPECT_THROW(negate_standardized(map_of({1.0}, Orientation::higher_means_ood), 0.0, 1.0), UsageError);
}

TEST(Standardization, AffineTransformOfRawEnergyLeavesZUnchanged) {
    std::mt19937 gen(13);
    std::normal_distribution<double> nd(8.0, 2.0);
    std::vector<double> raw(500);
    for (auto& x : raw) x = nd(gen);
    const double scale = 3.7, offset = -12.5;
    std::vector<double> transformed(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) transformed[i] = scale * raw[i] + offset;
    auto m0 = moments_of(raw), m1 = moments_of(transformed);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        EXPECT_NEAR(standardize(raw[i], m0.mean, m0.population_std()),
                    standardize(transformed[i], m1.mean, m1.population_std()), 1e-9);
    }
}

TEST(NormalizerJson, RoundTrip) {
    NormalizerStats s;
    s.neco_mean = 0.123456789012345678;
    s.neco_std = 0.0314159;
    s.energy_mean = -4.2;
    s.energy_std = 1.0 / 3.0;
    s.num_pixels = 123;
    s.manifest_hash = "abc";
    auto back = normalizer_from_json(nlohmann::json::parse(normalizer_to_json(s).dump()));
    EXPECT_EQ(back.neco_mean, s.neco_mean);
    EXPECT_EQ(back.neco_std, s.neco_std);
    EXPECT_EQ(back.energy_mean, s.energy_mean);
    EXPECT_EQ(back.energy_std, s.energy_std);
    EXPECT_EQ(back.num_pixels, 123u);
}
