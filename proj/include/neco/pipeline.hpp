#pragma once

// fit / score / eval / roc stages over a dataset manifest. Each stage reads
// and writes plain files under the run's output directory:
//
//   <out>/geometry.json, <out>/normalizer.json       fitted detector state
//   <out>/scores/<method>/<sample_id>.npy            OOD-oriented float32 maps
//   <out>/scores/meta.json                           scoring parameters
//   <out>/report.json, <out>/roc/*.csv, <out>/hist/*.csv

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "neco/dataset.hpp"
#include "neco/error.hpp"
#include "neco/fusion.hpp"
#include "neco/geometry.hpp"
#include "neco/json_util.hpp"
#include "neco/logit_scores.hpp"
#include "neco/metrics.hpp"
#include "neco/parallel.hpp"
#include "neco/random.hpp"

namespace neco {

inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"hybrid", "neco", "energy", "entropy"};
    return m;
}

struct RunConfig {
    std::filesystem::path manifest_path;
    std::filesystem::path output_dir;
    double alpha = 0.6;
    double temperature = 1.0;
    double pca_variance_threshold = 0.95;
    std::optional<int> pca_dim_override;
    double epsilon = 1e-12;
    std::size_t subsample_cap = 2048;
    std::uint64_t seed = 0;
    std::vector<std::string> methods = known_methods();
    std::vector<std::filesystem::path> ensemble_logit_dirs;
    std::vector<std::string> conditions;
    std::size_t jobs = 1;
    std::size_t approx_bins = 0;
    ArrayReader reader = default_reader;

    void validate() const {
        if (methods.empty()) throw UsageError("at least one method is required");
        for (const auto& m : methods)
            if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
                throw UsageError("unknown method '" + m + "' (expected hybrid, neco, energy or entropy)");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in [0, 1]");
        if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
        if (!(pca_variance_threshold > 0.0 && pca_variance_threshold <= 1.0))
            throw UsageError("PCA variance threshold must lie in (0, 1]");
        if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
        if (subsample_cap == 0) throw UsageError("subsample cap must be positive");
        if (jobs == 0) throw UsageError("jobs must be positive");
    }

    bool wants(const std::string& method) const {
        return std::find(methods.begin(), methods.end(), method) != methods.end();
    }
};

/// Overlays keys of a JSON config object onto `run`. Keys mirror the CLI flags
/// with underscores (e.g. "pca_variance", "ensemble_dirs").
inline void apply_config_json(RunConfig& run, const nlohmann::json& j) {
    if (!j.is_object()) throw UsageError("config file must hold a JSON object");
    static const std::set<std::string> allowed{"manifest", "out", "alpha", "temperature", "pca_variance", "pca_dim",
                                               "epsilon", "subsample_cap", "seed", "methods", "ensemble_dirs",
                                               "conditions", "jobs", "approx_bins"};
    try {
        for (const auto& [key, value] : j.items()) {
            if (!allowed.count(key)) throw UsageError("unknown config key '" + key + "'");
            if (key == "manifest") run.manifest_path = value.get<std::string>();
            else if (key == "out") run.output_dir = value.get<std::string>();
            else if (key == "alpha") run.alpha = value.get<double>();
            else if (key == "temperature") run.temperature = value.get<double>();
            else if (key == "pca_variance") run.pca_variance_threshold = value.get<double>();
            else if (key == "pca_dim") {
                if (value.is_null()) run.pca_dim_override.reset();
                else run.pca_dim_override = value.get<int>();
            } else if (key == "epsilon") run.epsilon = value.get<double>();
            else if (key == "subsample_cap") run.subsample_cap = value.get<std::size_t>();
            else if (key == "seed") run.seed = value.get<std::uint64_t>();
            else if (key == "methods") run.methods = value.get<std::vector<std::string>>();
            else if (key == "ensemble_dirs") {
                run.ensemble_logit_dirs.clear();
                for (const auto& d : value) run.ensemble_logit_dirs.emplace_back(d.get<std::string>());
            } else if (key == "conditions") run.conditions = value.get<std::vector<std::string>>();
            else if (key == "jobs") run.jobs = value.get<std::size_t>();
            else if (key == "approx_bins") run.approx_bins = value.get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config file: ") + e.what());
    }
}

namespace pipeline_detail {

/// Re-raises a library error with the sample id prepended, keeping its kind.
template <typename F>
auto with_sample(const std::string& id, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw_error(e.kind(), "sample '" + id + "': " + e.what());
    }
}

inline std::vector<std::size_t> sorted_by_id(const DatasetManifest& m, Split split) {
    auto idx = m.indices_of(split);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return m.samples[a].id < m.samples[b].id; });
    return idx;
}

inline void make_dirs(const std::filesystem::path& p) {
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec) throw DataError("cannot create " + p.string() + ": " + ec.message());
}

}  // namespace pipeline_detail

struct FittedState {
    GeometryStats geometry;
    NormalizerStats normalizer;
};

inline std::uint64_t sample_subsample_seed(std::uint64_t seed, const std::string& sample_id) {
    return derive_seed(seed, {hash_string(sample_id)});
}

/// Fits geometry then the score normalizer on the ID pixels of val_id, and
/// writes geometry.json / normalizer.json.
inline FittedState cmd_fit(const RunConfig& run) {
    using namespace pipeline_detail;
    run.validate();
    const DatasetManifest manifest = load_manifest(run.manifest_path);
    const auto val = sorted_by_id(manifest, Split::val_id);
    if (val.empty()) throw DataError("split val_id is empty in " + run.manifest_path.string() + "; nothing to fit");

    std::vector<FeatureAccumulator> partial(val.size());
    parallel_for(val.size(), run.jobs, [&](std::size_t j) {
        const auto& id = manifest.samples[val[j]].id;
        partial[j] = with_sample(id, [&] {
            const DenseSample s = load_sample(manifest, val[j], run.reader);
            const RoleMask roles = remap_labels(s.labels, manifest.num_classes, manifest.ignore_label);
            return accumulate_features(FeatureAccumulator(s.feature_dim()), s, roles, run.subsample_cap,
                                       sample_subsample_seed(run.seed, id));
        });
    });
    FeatureAccumulator acc;
    for (const auto& p : partial) acc.merge(p);

    FittedState state;
    state.geometry = fit_geometry(acc, run.pca_variance_threshold, run.pca_dim_override, run.epsilon);
    state.geometry.fit_meta.subsample_seed = run.seed;
    state.geometry.fit_meta.subsample_cap = run.subsample_cap;
    state.geometry.fit_meta.feature_layer = manifest.feature_layer;

    const EnergyConfig energy_cfg{run.temperature};
    std::vector<SampleMoments> moments(val.size());
    parallel_for(val.size(), run.jobs, [&](std::size_t j) {
        moments[j] = with_sample(manifest.samples[val[j]].id, [&] {
            const DenseSample s = load_sample(manifest, val[j], run.reader);
            const RoleMask roles = remap_labels(s.labels, manifest.num_classes, manifest.ignore_label);
            return sample_moments(neco_map(s, state.geometry), energy_map(s.logits, energy_cfg), roles);
        });
    });
    SampleMoments total;
    for (const auto& m : moments) {
        total.neco.merge(m.neco);
        total.energy.merge(m.energy);
    }
    state.normalizer = normalizer_from_moments(total.neco, total.energy);
    state.normalizer.manifest_hash = manifest.content_hash;

    make_dirs(run.output_dir);
    write_text_file(run.output_dir / "geometry.json", geometry_to_json(state.geometry).dump(2) + "\n");
    write_text_file(run.output_dir / "normalizer.json", normalizer_to_json(state.normalizer).dump(2) + "\n");
    return state;
}

inline FittedState load_fitted_state(const std::filesystem::path& output_dir) {
    const auto g = output_dir / "geometry.json";
    const auto n = output_dir / "normalizer.json";
    if (!std::filesystem::exists(g) || !std::filesystem::exists(n))
        throw DataError("missing fitted state in " + output_dir.string() + " (run `fit` first)");
    return {geometry_from_json(read_json_file(g)), normalizer_from_json(read_json_file(n))};
}

inline std::filesystem::path score_path(const std::filesystem::path& out, const std::string& method,
                                        const std::string& sample_id) {
    return out / "scores" / method / (sample_id + ".npy");
}

/// OOD-oriented maps for one sample. Features and logits are read once each.
inline std::map<std::string, ScoreMap> score_sample(const RunConfig& run, const DatasetManifest& manifest,
                                                    std::size_t index, const FittedState& state) {
    const auto& e = manifest.samples.at(index);
    DenseSample s;
    s.id = e.id;
    s.condition = e.condition;
    s.split = e.split;
    s.features = run.reader(manifest.resolve(e.feature_path));
    s.logits = run.reader(manifest.resolve(e.logit_path));
    if (s.features.rank() != 3 || s.logits.rank() != 3 || s.features.dim(0) != s.logits.dim(0) ||
        s.features.dim(1) != s.logits.dim(1))
        throw DataError("feature/logit shape mismatch: " + shape_string(s.features.shape()) + " vs " +
                        shape_string(s.logits.shape()));
    if (s.logits.dim(2) != static_cast<std::size_t>(manifest.num_classes))
        throw DataError("logit depth " + std::to_string(s.logits.dim(2)) + " does not match num_classes " +
                        std::to_string(manifest.num_classes));

    std::map<std::string, ScoreMap> out;
    const bool need_neco = run.wants("neco") || run.wants("hybrid");
    const bool need_energy = run.wants("energy") || run.wants("hybrid");
    ScoreMap neco;
    ScoreMap energy;
    if (need_neco) neco = neco_map(s, state.geometry);
    if (need_energy) energy = energy_map(s.logits, EnergyConfig{run.temperature});
    const auto& norm = state.normalizer;
    if (run.wants("hybrid")) out["hybrid"] = hybrid_map(neco, energy, norm, FusionConfig{run.alpha});
    if (run.wants("neco")) out["neco"] = negate_standardized(neco, norm.neco_mean, norm.neco_std);
    if (run.wants("energy")) out["energy"] = negate_standardized(energy, norm.energy_mean, norm.energy_std);
    if (run.wants("entropy")) {
        ProbMap probs;
        if (run.ensemble_logit_dirs.empty()) {
            probs = softmax_probs(s.logits, run.temperature);
        } else {
            std::vector<Tensor> members;
            for (const auto& dir : run.ensemble_logit_dirs) members.push_back(run.reader(dir / (e.id + ".npy")));
            if (members.front().shape() != s.logits.shape())
                throw DataError("ensemble logits " + shape_string(members.front().shape()) +
                                " do not match sample logits " + shape_string(s.logits.shape()));
            probs = ensemble_mean_probs(members, run.temperature);
        }
        out["entropy"] = entropy_map(probs);
    }
    return out;
}

/// Scores every test-split sample and writes one NPY map per (sample, method).
/// Returns the number of samples scored.
inline std::size_t cmd_score(const RunConfig& run) {
    using namespace pipeline_detail;
    run.validate();
    const DatasetManifest manifest = load_manifest(run.manifest_path);
    const FittedState state = load_fitted_state(run.output_dir);
    const auto test = manifest.indices_of(Split::test);
    for (const auto& m : run.methods) make_dirs(run.output_dir / "scores" / m);

    parallel_for(test.size(), run.jobs, [&](std::size_t j) {
        const auto& id = manifest.samples[test[j]].id;
        with_sample(id, [&] {
            for (const auto& [method, map] : score_sample(run, manifest, test[j], state))
                write_array(score_path(run.output_dir, method, id), map.to_tensor());
        });
    });

    nlohmann::ordered_json meta;
    meta["orientation"] = "higher-means-OOD";
    meta["methods"] = run.methods;
    meta["alpha"] = run.alpha;
    meta["temperature"] = run.temperature;
    meta["ensemble_size"] = run.ensemble_logit_dirs.empty() ? 1 : run.ensemble_logit_dirs.size();
    meta["num_samples"] = test.size();
    write_text_file(run.output_dir / "scores" / "meta.json", meta.dump(2) + "\n");
    return test.size();
}

struct LoadedScores {
    std::vector<std::size_t> samples;
    std::vector<RoleMask> roles;
    std::vector<MethodScores> methods;
    std::size_t ensemble_size = 1;
};

inline LoadedScores load_scores(const RunConfig& run, const DatasetManifest& manifest) {
    using namespace pipeline_detail;
    LoadedScores ls;
    ls.samples = manifest.indices_of(Split::test);
    if (ls.samples.empty()) throw DataError("split test is empty; nothing to evaluate");
    ls.roles.resize(ls.samples.size());
    parallel_for(ls.samples.size(), run.jobs, [&](std::size_t j) {
        ls.roles[j] = with_sample(manifest.samples[ls.samples[j]].id, [&] {
            return remap_labels(load_labels(manifest, ls.samples[j], run.reader), manifest.num_classes,
                                manifest.ignore_label);
        });
    });
    const auto meta_path = run.output_dir / "scores" / "meta.json";
    if (std::filesystem::exists(meta_path)) {
        const auto meta = read_json_file(meta_path);
        if (meta.contains("ensemble_size")) ls.ensemble_size = meta["ensemble_size"].get<std::size_t>();
    }
    for (const auto& method : run.methods) {
        MethodScores ms;
        ms.method = method;
        ms.maps.resize(ls.samples.size());
        parallel_for(ls.samples.size(), run.jobs, [&](std::size_t j) {
            const auto& id = manifest.samples[ls.samples[j]].id;
            const auto path = score_path(run.output_dir, method, id);
            if (!std::filesystem::exists(path))
                throw DataError("missing score map " + path.string() + " (run `score` for method '" + method + "')");
            ms.maps[j] = ScoreMap::from_tensor(run.reader(path), Orientation::higher_means_ood);
            if (ms.maps[j].height != ls.roles[j].height() || ms.maps[j].width != ls.roles[j].width())
                throw DataError("sample '" + id + "': score map shape does not match labels");
        });
        ls.methods.push_back(std::move(ms));
    }
    return ls;
}

inline ScorePool global_pool(const LoadedScores& ls, const MethodScores& ms) {
    ScorePool pool;
    pool.method = ms.method;
    for (std::size_t j = 0; j < ls.samples.size(); ++j) pool_sample(pool, ms.maps[j], ls.roles[j]);
    return pool;
}

/// Report over the test split plus ROC and distribution CSVs per method.
inline EvalReport cmd_eval(const RunConfig& run) {
    using namespace pipeline_detail;
    run.validate();
    const DatasetManifest manifest = load_manifest(run.manifest_path);
    const LoadedScores ls = load_scores(run, manifest);
    const EvalOptions opts{run.approx_bins};
    EvalReport report = condition_report(manifest, ls.samples, ls.methods, ls.roles, run.conditions, opts);
    report.ensemble_size = ls.ensemble_size;

    make_dirs(run.output_dir / "roc");
    make_dirs(run.output_dir / "hist");
    for (const auto& ms : ls.methods) {
        const ScorePool pool = global_pool(ls, ms);
        if (!pool.id_scores.empty() || !pool.ood_scores.empty())
            write_text_file(run.output_dir / "hist" / (ms.method + ".csv"), histogram_to_csv(pool));
        if (!pool.id_scores.empty() && !pool.ood_scores.empty())
            write_text_file(run.output_dir / "roc" / (ms.method + ".csv"), roc_to_csv(curve_for(pool, opts)));
    }
    write_text_file(run.output_dir / "report.json", report_to_json(report).dump(2) + "\n");
    return report;
}

struct OperatingPoint {
    std::string method;
    double target_tpr;
    std::optional<double> fpr;
};

/// Exports ROC CSVs and returns FPR at each target TPR per method.
inline std::vector<OperatingPoint> cmd_roc(const RunConfig& run, const std::vector<double>& targets) {
    using namespace pipeline_detail;
    run.validate();
    const DatasetManifest manifest = load_manifest(run.manifest_path);
    const LoadedScores ls = load_scores(run, manifest);
    make_dirs(run.output_dir / "roc");
    std::vector<OperatingPoint> out;
    for (const auto& ms : ls.methods) {
        const ScorePool pool = global_pool(ls, ms);
        std::optional<RocCurve> curve;
        if (!pool.id_scores.empty() && !pool.ood_scores.empty()) {
            curve = curve_for(pool, EvalOptions{run.approx_bins});
            write_text_file(run.output_dir / "roc" / (ms.method + ".csv"), roc_to_csv(*curve));
        }
        for (double t : targets) {
            OperatingPoint p{ms.method, t, std::nullopt};
            if (curve) p.fpr = fpr_at_tpr(*curve, t);
            out.push_back(p);
        }
    }
    return out;
}

}  // namespace neco
