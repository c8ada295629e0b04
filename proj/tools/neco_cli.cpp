// neco: fit, score and evaluate pixel-wise OOD detectors on dumped decoder
// features and logits; generate synthetic neural-collapse benchmarks.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neco/pipeline.hpp"
#include "neco/synth.hpp"

namespace {

struct RunFlags {
    std::string config;
    std::string manifest;
    std::string out;
    std::optional<double> alpha;
    std::optional<double> temperature;
    std::optional<double> pca_variance;
    std::optional<int> pca_dim;
    std::optional<double> epsilon;
    std::optional<std::size_t> subsample_cap;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> methods;
    std::vector<std::string> ensemble_dirs;
    std::vector<std::string> conditions;
    std::optional<std::size_t> jobs;
    std::optional<std::size_t> approx_bins;
    bool approx = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--config", f.config, "JSON file with run settings; flags override it");
    cmd->add_option("--manifest", f.manifest, "dataset manifest (JSON)");
    cmd->add_option("--out", f.out, "output directory for fitted state, scores and reports");
    cmd->add_option("--alpha", f.alpha, "weight of the geometric term in the hybrid score (default 0.6)");
    cmd->add_option("--temperature", f.temperature, "energy / softmax temperature (default 1.0)");
    cmd->add_option("--pca-variance", f.pca_variance, "cumulative explained variance selecting k (default 0.95)");
    cmd->add_option("--pca-dim", f.pca_dim, "fixed PCA dimension k (overrides --pca-variance)");
    cmd->add_option("--epsilon", f.epsilon, "denominator offset of the projection ratio (default 1e-12)");
    cmd->add_option("--subsample-cap", f.subsample_cap, "max pixels per image entering the SVD (default 2048)");
    cmd->add_option("--seed", f.seed, "subsampling seed (default 0)");
    cmd->add_option("--methods", f.methods, "subset of hybrid,neco,energy,entropy")->delimiter(',');
    cmd->add_option("--ensemble-dirs", f.ensemble_dirs, "directories of <sample_id>.npy member logits")
        ->delimiter(',');
    cmd->add_option("--conditions", f.conditions, "condition tags for per-condition rows")->delimiter(',');
    cmd->add_option("--jobs", f.jobs, "worker threads (default 1)");
    cmd->add_flag("--approx", f.approx, "histogram-binned metrics (65536 bins) instead of exact sorting");
}

neco::RunConfig resolve(const RunFlags& f) {
    neco::RunConfig run;
    if (!f.config.empty()) neco::apply_config_json(run, neco::read_json_file(f.config));
    if (!f.manifest.empty()) run.manifest_path = f.manifest;
    if (!f.out.empty()) run.output_dir = f.out;
    if (f.alpha) run.alpha = *f.alpha;
    if (f.temperature) run.temperature = *f.temperature;
    if (f.pca_variance) run.pca_variance_threshold = *f.pca_variance;
    if (f.pca_dim) run.pca_dim_override = *f.pca_dim;
    if (f.epsilon) run.epsilon = *f.epsilon;
    if (f.subsample_cap) run.subsample_cap = *f.subsample_cap;
    if (f.seed) run.seed = *f.seed;
    if (!f.methods.empty()) run.methods = f.methods;
    if (!f.ensemble_dirs.empty()) run.ensemble_logit_dirs.assign(f.ensemble_dirs.begin(), f.ensemble_dirs.end());
    if (!f.conditions.empty()) run.conditions = f.conditions;
    if (f.jobs) run.jobs = *f.jobs;
    if (f.approx) run.approx_bins = neco::kApproxBins;
    if (run.manifest_path.empty()) throw neco::UsageError("--manifest is required");
    if (run.output_dir.empty()) throw neco::UsageError("--out is required");
    return run;
}

void print_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pixel-wise OOD scoring for semantic segmentation (NECO / Energy / Hybrid / entropy)"};
    app.require_subcommand(1);

    RunFlags fit_flags, score_flags, eval_flags, roc_flags;
    auto* fit = app.add_subcommand("fit", "fit feature geometry and score normalizer on the val_id split");
    add_run_flags(fit, fit_flags);
    auto* score = app.add_subcommand("score", "write per-sample OOD score maps for the test split");
    add_run_flags(score, score_flags);
    auto* eval = app.add_subcommand("eval", "AUROC / mean scores / FPR95 / FPR98 report");
    add_run_flags(eval, eval_flags);
    auto* roc = app.add_subcommand("roc", "export ROC curves and FPR at target TPRs");
    add_run_flags(roc, roc_flags);
    std::vector<double> targets{0.95, 0.98};
    roc->add_option("--targets", targets, "target TPRs")->delimiter(',');

    neco::SynthConfig synth_cfg;
    std::string synth_out;
    std::size_t synth_jobs = 1;
    auto* synth = app.add_subcommand("synth", "generate a synthetic neural-collapse benchmark");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_cfg.seed, "generator seed (default 7)");
    synth->add_option("--classes", synth_cfg.num_classes, "number of ID classes K (default 8)");
    synth->add_option("--dim", synth_cfg.feature_dim, "feature dimension d >= K (default 32)");
    synth->add_option("--height", synth_cfg.height, "image height (default 64)");
    synth->add_option("--width", synth_cfg.width, "image width (default 128)");
    synth->add_option("--val-images", synth_cfg.num_val_images, "val_id images (default 8)");
    synth->add_option("--test-images", synth_cfg.num_test_images, "test images (default 8)");
    synth->add_option("--noise", synth_cfg.within_class_noise, "within-class noise std (default 0.1)");
    synth->add_option("--ood-fraction", synth_cfg.ood_fraction, "OOD pixel fraction per test image (default 0.1)");
    synth->add_option("--anomaly-mix", synth_cfg.anomaly_mix, "fraction of off-subspace anomalies (default 0.5)");
    synth->add_option("--anomaly-offset", synth_cfg.anomaly_offset, "off-subspace displacement norm (default 3)");
    synth->add_option("--centroid-shrink", synth_cfg.centroid_shrink, "in-subspace shrink factor (default 0.15)");
    synth->add_option("--logit-scale", synth_cfg.logit_scale, "classifier logit scale (default 10)");
    synth->add_option("--conditions", synth_cfg.conditions, "condition tags assigned round-robin")->delimiter(',');
    synth->add_option("--jobs", synth_jobs, "worker threads (default 1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(neco::ErrorKind::usage);
    }

    try {
        if (*fit) {
            const auto state = neco::cmd_fit(resolve(fit_flags));
            std::printf("fitted geometry: d=%zu k=%zu from %llu ID pixels (%llu buffered)\n", state.geometry.dim(),
                        state.geometry.rank(), static_cast<unsigned long long>(state.geometry.fit_meta.num_pixels_used),
                        static_cast<unsigned long long>(state.geometry.fit_meta.num_buffered));
            std::printf("normalizer: NECO %.6g +- %.6g, Energy %.6g +- %.6g\n", state.normalizer.neco_mean,
                        state.normalizer.neco_std, state.normalizer.energy_mean, state.normalizer.energy_std);
        } else if (*score) {
            const auto run = resolve(score_flags);
            const auto n = neco::cmd_score(run);
            std::printf("scored %zu samples -> %s\n", n, (run.output_dir / "scores").string().c_str());
        } else if (*eval) {
            const auto report = neco::cmd_eval(resolve(eval_flags));
            std::cout << neco::format_report_table(report);
            print_warnings(report.warnings);
        } else if (*roc) {
            for (const auto& p : neco::cmd_roc(resolve(roc_flags), targets)) {
                if (p.fpr) std::printf("%-10s FPR@TPR=%.4f  %.4f\n", p.method.c_str(), p.target_tpr, *p.fpr);
                else std::printf("%-10s FPR@TPR=%.4f  null\n", p.method.c_str(), p.target_tpr);
            }
        } else if (*synth) {
            const auto m = neco::generate_benchmark(synth_cfg, synth_out, synth_jobs);
            std::printf("wrote %zu samples to %s\n", m.samples.size(), synth_out.c_str());
        }
    } catch (const neco::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(neco::ErrorKind::data);
    }
    return 0;
}
