#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "neco/metrics.hpp"
#include "oracles/oracles.hpp"

using namespace neco;

namespace {

ScorePool pool_of(std::vector<double> id, std::vector<double> ood) {
    ScorePool p;
    p.id_scores = std::move(id);
    p.ood_scores = std::move(ood);
    return p;
}

// Scores drawn from a small integer grid so ties are common.
ScorePool random_pool(std::mt19937& gen, std::size_t n_id, std::size_t n_ood, bool ties) {
    std::normal_distribution<double> nd;
    auto draw = [&](double shift) {
        double v = nd(gen) + shift;
        return ties ? std::round(v * 4.0) / 4.0 : v;
    };
    ScorePool p;
    for (std::size_t i = 0; i < n_id; ++i) p.id_scores.push_back(draw(0.0));
    for (std::size_t i = 0; i < n_ood; ++i) p.ood_scores.push_back(draw(1.0));
    return p;
}

ScoreMap ood_map(std::size_t h, std::size_t w, std::vector<double> v) {
    ScoreMap m(h, w, Orientation::higher_means_ood);
    m.values = std::move(v);
    return m;
}

RoleMask roles_of(std::size_t h, std::size_t w, std::vector<std::int32_t> codes) {
    return RoleMask(h, w, std::move(codes));
}

DatasetManifest manifest_with_conditions(const std::vector<std::string>& tags) {
    DatasetManifest m;
    m.num_classes = 2;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        SampleEntry e;
        e.id = "s" + std::to_string(i);
        e.condition = tags[i];
        e.split = Split::test;
        m.samples.push_back(e);
    }
    return m;
}

}  // namespace

TEST(Auroc, Examples) {
    EXPECT_EQ(auroc(pool_of({0.1, 0.2}, {0.8, 0.9})), 1.0);
    EXPECT_EQ(auroc(pool_of({0.5, 0.5}, {0.5, 0.5})), 0.5);
    EXPECT_EQ(auroc(pool_of({0.8, 0.9}, {0.1, 0.2})), 0.0);
    EXPECT_NEAR(auroc(pool_of({0.1, 0.4, 0.35}, {0.8, 0.3, 0.45})), 7.0 / 9.0, 1e-15);
}

TEST(Auroc, RequiresBothSides) {
    EXPECT_THROW(auroc(pool_of({}, {1.0})), DataError);
    EXPECT_THROW(auroc(pool_of({1.0}, {})), DataError);
    EXPECT_THROW(roc_curve(pool_of({}, {1.0})), DataError);
}

TEST(Auroc, MatchesPairwiseOracle) {
    std::mt19937 gen(42);
    std::uniform_int_distribution<std::size_t> size(1, 400);
    for (int trial = 0; trial < 200; ++trial) {
        auto p = random_pool(gen, size(gen), size(gen), trial % 2 == 0);
        const double expected = oracle::pairwise_auroc(p.id_scores, p.ood_scores);
        EXPECT_NEAR(auroc(p), expected, 1e-12) << "trial " << trial;
        auto curve = roc_curve(p);
        EXPECT_NEAR(curve.auroc, expected, 1e-9) << "trial " << trial;
        for (double t : {0.95, 0.98}) {
            EXPECT_NEAR(fpr_at_tpr(curve, t), oracle::enumerated_fpr_at_tpr(p.id_scores, p.ood_scores, t), 1e-9)
                << "trial " << trial << " target " << t;
        }
    }
}

TEST(RocCurve, PassesThroughZeroOneForPerfectSeparation) {
    auto c = roc_curve(pool_of({0.1, 0.2}, {0.8, 0.9}));
    bool found = false;
    for (const auto& p : c.points) found |= p.fpr == 0.0 && p.tpr == 1.0;
    EXPECT_TRUE(found);
    EXPECT_EQ(fpr_at_tpr(c, 0.95), 0.0);
}

TEST(RocCurve, AllTiedIsTheDiagonal) {
    auto c = roc_curve(pool_of({0.5, 0.5, 0.5}, {0.5, 0.5}));
    ASSERT_EQ(c.points.size(), 2u);
    EXPECT_EQ(c.points[1].fpr, 1.0);
    EXPECT_EQ(c.points[1].tpr, 1.0);
    EXPECT_EQ(c.auroc, 0.5);
}

TEST(RocCurve, StructureAndAreaEqualsAuroc) {
    std::mt19937 gen(9);
    for (std::size_t n : {10u, 1000u, 100000u}) {
        auto p = random_pool(gen, n, n / 2 + 1, n == 1000u);
        auto c = roc_curve(p);
        ASSERT_GE(c.points.size(), 2u);
        EXPECT_EQ(c.points.front().fpr, 0.0);
        EXPECT_EQ(c.points.front().tpr, 0.0);
        EXPECT_TRUE(std::isinf(c.points.front().threshold));
        EXPECT_EQ(c.points.back().fpr, 1.0);
        EXPECT_EQ(c.points.back().tpr, 1.0);
        for (std::size_t i = 1; i < c.points.size(); ++i) {
            EXPECT_LT(c.points[i].threshold, c.points[i - 1].threshold);
            EXPECT_GE(c.points[i].fpr, c.points[i - 1].fpr);
            EXPECT_GE(c.points[i].tpr, c.points[i - 1].tpr);
        }
        EXPECT_NEAR(trapezoid_area(c), auroc(p), 1e-9);
    }
}

TEST(FprAtTpr, Example) {
    // At TPR 1 every OOD score (>= 0.3) must be flagged; one of four ID scores sits above 0.3.
    auto p = pool_of({0.1, 0.2, 0.25, 0.4}, {0.3, 0.5, 0.6, 0.7});
    EXPECT_EQ(oracle::enumerated_fpr_at_tpr(p.id_scores, p.ood_scores, 0.95), 0.25);
    EXPECT_EQ(fpr_at_tpr(roc_curve(p), 0.95), 0.25);
    EXPECT_EQ(fpr_at_tpr(roc_curve(p), 0.75), 0.0);
    EXPECT_THROW(fpr_at_tpr(roc_curve(p), 0.0), UsageError);
    EXPECT_THROW(fpr_at_tpr(roc_curve(p), 1.5), UsageError);
}

TEST(Metrics, InvariantUnderStrictlyIncreasingTransforms) {
    std::mt19937 gen(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = random_pool(gen, 300, 120, trial % 2 == 0);
        auto q = p;
        auto f = [](double v) { return std::exp(0.7 * v) + 3.0 * v; };
        for (auto& v : q.id_scores) v = f(v);
        for (auto& v : q.ood_scores) v = f(v);
        EXPECT_NEAR(auroc(q), auroc(p), 1e-12);
        auto cp = roc_curve(p), cq = roc_curve(q);
        EXPECT_EQ(fpr_at_tpr(cq, 0.95), fpr_at_tpr(cp, 0.95));
        EXPECT_EQ(fpr_at_tpr(cq, 0.98), fpr_at_tpr(cp, 0.98));
    }
}

TEST(Metrics, NegationComplementsAuroc) {
    std::mt19937 gen(8);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = random_pool(gen, 200, 90, trial % 2 == 1);
        auto q = p;
        for (auto& v : q.id_scores) v = -v;
        for (auto& v : q.ood_scores) v = -v;
        EXPECT_NEAR(auroc(p) + auroc(q), 1.0, 1e-12);
    }
}

TEST(Metrics, StricterTprTargetNeverLowersFpr) {
    std::mt19937 gen(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto c = roc_curve(random_pool(gen, 150, 60, trial % 3 == 0));
        EXPECT_GE(fpr_at_tpr(c, 0.98), fpr_at_tpr(c, 0.95));
    }
}

TEST(MeanScores, Example) {
    auto [id, ood] = mean_scores(pool_of({1.0, 2.0, 3.0}, {10.0}));
    EXPECT_EQ(id, 2.0);
    EXPECT_EQ(ood, 10.0);
    EXPECT_THROW(mean_scores(pool_of({}, {1.0})), DataError);
}

TEST(PoolScores, PartitionsByRole) {
    // 2 x 3: ID, ID, OOD, IGNORE, ID, OOD
    std::vector<ScoreMap> maps{ood_map(2, 3, {0.1, 0.2, 0.9, 5.0, 0.3, 0.8})};
    std::vector<RoleMask> roles{roles_of(2, 3, {0, 1, RoleMask::kOod, RoleMask::kIgnore, 0, RoleMask::kOod})};
    std::vector<std::string> conds{"day"};
    auto p = pool_scores(maps, roles, conds);
    EXPECT_EQ(p.id_scores, (std::vector<double>{0.1, 0.2, 0.3}));
    EXPECT_EQ(p.ood_scores, (std::vector<double>{0.9, 0.8}));
}

TEST(PoolScores, ConditionFilterAndEmptySamples) {
    std::vector<ScoreMap> maps{ood_map(1, 2, {0.1, 0.9}), ood_map(1, 2, {0.2, 0.8}), ood_map(1, 2, {7.0, 7.0})};
    std::vector<RoleMask> roles{roles_of(1, 2, {0, RoleMask::kOod}), roles_of(1, 2, {1, RoleMask::kOod}),
                                roles_of(1, 2, {RoleMask::kIgnore, RoleMask::kIgnore})};
    std::vector<std::string> conds{"day", "night", "day"};
    auto night = pool_scores(maps, roles, conds, std::string("night"));
    EXPECT_EQ(night.id_scores, (std::vector<double>{0.2}));
    EXPECT_EQ(night.ood_scores, (std::vector<double>{0.8}));
    EXPECT_EQ(night.condition, "night");

    // The all-ignore sample contributes nothing.
    auto all = pool_scores(maps, roles, conds);
    EXPECT_EQ(all.id_scores.size(), 2u);
    EXPECT_EQ(all.ood_scores.size(), 2u);

    EXPECT_THROW(pool_scores(std::span(maps).last(1), std::span(roles).last(1), std::span(conds).last(1)), DataError);
}

TEST(PoolScores, RejectsWrongOrientationAndNonFinite) {
    ScoreMap m(1, 1, Orientation::higher_means_id);
    ScorePool p;
    EXPECT_THROW(pool_sample(p, m, roles_of(1, 1, {0})), UsageError);
    EXPECT_THROW(pool_sample(p, ood_map(1, 1, {std::nan("")}), roles_of(1, 1, {0})), NumericError);
    EXPECT_THROW(pool_sample(p, ood_map(1, 2, {0.0, 1.0}), roles_of(1, 1, {0})), DataError);
}

TEST(ConditionReport, GlobalPlusOneRowPerCondition) {
    const std::vector<std::string> tags{"low_light", "high_light", "low_contrast", "high_contrast"};
    auto manifest = manifest_with_conditions({"low_light", "high_light", "low_contrast", "high_contrast", "low_light"});
    std::vector<std::size_t> idx{0, 1, 2, 3, 4};
    std::mt19937 gen(3);
    std::normal_distribution<double> nd;
    MethodScores ms{"hybrid", {}};
    std::vector<RoleMask> roles;
    for (std::size_t s = 0; s < idx.size(); ++s) {
        std::vector<double> v(8);
        std::vector<std::int32_t> codes(8);
        for (std::size_t i = 0; i < 8; ++i) {
            codes[i] = i < 5 ? 0 : RoleMask::kOod;
            v[i] = nd(gen) + (i < 5 ? 0.0 : 1.5);
        }
        ms.maps.push_back(ood_map(2, 4, v));
        roles.push_back(roles_of(2, 4, codes));
    }
    std::vector<MethodScores> methods{ms};
    auto report = condition_report(manifest, idx, methods, roles, tags);
    ASSERT_EQ(report.rows.size(), 5u);
    EXPECT_EQ(report.rows[0].condition, "all");
    EXPECT_EQ(report.rows[0].num_id, 25u);
    EXPECT_EQ(report.rows[0].num_ood, 15u);
    for (std::size_t r = 1; r < 5; ++r) {
        EXPECT_EQ(report.rows[r].condition, tags[r - 1]);
        EXPECT_TRUE(report.rows[r].auroc.has_value());
    }
    EXPECT_EQ(report.rows[1].num_id, 10u);
    EXPECT_TRUE(report.warnings.empty());

    // Table and JSON carry every row.
    auto table = format_report_table(report);
    for (const auto& t : tags) EXPECT_NE(table.find(t), std::string::npos);
    EXPECT_EQ(report_to_json(report)["rows"].size(), 5u);
}

TEST(ConditionReport, SingleConditionRowEqualsGlobal) {
    auto manifest = manifest_with_conditions({"fog", "fog"});
    std::vector<std::size_t> idx{0, 1};
    MethodScores ms{"energy", {ood_map(1, 3, {0.1, 0.7, 0.2}), ood_map(1, 3, {0.4, 0.3, 0.9})}};
    std::vector<RoleMask> roles{roles_of(1, 3, {0, RoleMask::kOod, 1}), roles_of(1, 3, {0, 0, RoleMask::kOod})};
    std::vector<MethodScores> methods{ms};
    std::vector<std::string> conds{"fog"};
    auto r = condition_report(manifest, idx, methods, roles, conds);
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_EQ(r.rows[0].auroc, r.rows[1].auroc);
    EXPECT_EQ(r.rows[0].fpr95, r.rows[1].fpr95);
    EXPECT_EQ(r.rows[0].id_mean, r.rows[1].id_mean);
    EXPECT_EQ(r.rows[0].ood_mean, r.rows[1].ood_mean);
}

TEST(ConditionReport, ZeroOodConditionGivesNullMetrics) {
    auto manifest = manifest_with_conditions({"clear", "rain"});
    std::vector<std::size_t> idx{0, 1};
    MethodScores ms{"neco", {ood_map(1, 2, {0.1, 0.9}), ood_map(1, 2, {0.2, 0.3})}};
    std::vector<RoleMask> roles{roles_of(1, 2, {0, RoleMask::kOod}), roles_of(1, 2, {0, 1})};
    std::vector<MethodScores> methods{ms};
    std::vector<std::string> conds{"rain"};
    auto r = condition_report(manifest, idx, methods, roles, conds);
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_TRUE(r.rows[0].auroc.has_value());
    EXPECT_FALSE(r.rows[1].auroc.has_value());
    EXPECT_FALSE(r.rows[1].fpr95.has_value());
    EXPECT_FALSE(r.rows[1].ood_mean.has_value());
    EXPECT_TRUE(r.rows[1].id_mean.has_value());
    EXPECT_EQ(r.warnings.size(), 1u);
    EXPECT_TRUE(report_to_json(r)["rows"][1]["auroc"].is_null());
    EXPECT_NE(format_report_table(r).find("null"), std::string::npos);
}

TEST(ConditionReport, UnknownConditionIsAnError) {
    auto manifest = manifest_with_conditions({"clear"});
    std::vector<std::size_t> idx{0};
    std::vector<MethodScores> methods{{"neco", {ood_map(1, 2, {0.1, 0.9})}}};
    std::vector<RoleMask> roles{roles_of(1, 2, {0, RoleMask::kOod})};
    std::vector<std::string> conds{"snow"};
    EXPECT_THROW(condition_report(manifest, idx, methods, roles, conds), UsageError);
}

TEST(BinnedMetrics, CloseToExactOnContinuousScores) {
    std::mt19937 gen(17);
    auto p = random_pool(gen, 20000, 5000, false);
    auto exact = roc_curve(p);
    auto approx = roc_curve_binned(BinnedPool::from_pool(p, kApproxBins));
    EXPECT_TRUE(approx.approximate);
    EXPECT_NEAR(approx.auroc, exact.auroc, 1e-3);
    EXPECT_NEAR(fpr_at_tpr(approx, 0.95), fpr_at_tpr(exact, 0.95), 1e-2);

    EvalOptions opts{kApproxBins};
    auto row = evaluate_pool(p, opts);
    EXPECT_NEAR(*row.auroc, exact.auroc, 1e-3);
}

TEST(BinnedMetrics, ExactWhenScoresAreFewDistinctValues) {
    auto p = pool_of({0.0, 0.0, 1.0, 2.0}, {1.0, 2.0, 2.0});
    auto approx = roc_curve_binned(BinnedPool::from_pool(p, 16));
    EXPECT_NEAR(approx.auroc, auroc(p), 1e-15);
}

TEST(Csv, Headers) {
    auto p = pool_of({0.1, 0.2}, {0.8, 0.9});
    auto roc = roc_to_csv(roc_curve(p));
    EXPECT_EQ(roc.rfind("threshold,fpr,tpr\n", 0), 0u);
    EXPECT_NE(roc.find("inf,0,0\n"), std::string::npos);
    auto hist = histogram_to_csv(p, 10);
    EXPECT_EQ(hist.rfind("bin_lo,bin_hi,id_count,ood_count,id_fraction,ood_fraction\n", 0), 0u);
    EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 11);
}
