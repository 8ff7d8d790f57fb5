// Arm contrasts between unit endpoints: targeting, adaptive
// pre-specification, inference, and the sensitivity grid.

#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "crtmle/stage2.hpp"

using namespace crtmle;

namespace {

std::vector<UnitRow> make_rows(const std::vector<int>& arms, const std::vector<double>& endpoints,
                               const std::vector<double>& adjuster = {},
                               const std::string& adjuster_name = "w_w") {
    std::vector<UnitRow> rows;
    for (std::size_t i = 0; i < arms.size(); ++i) {
        UnitRow row;
        row.unit_id = (i < 10 ? "u0" : "u") + std::to_string(i);
        row.arm = arms[i];
        if (!adjuster.empty()) {
            row.adjuster_names = {adjuster_name};
            row.adjusters = {adjuster[i]};
        }
        row.endpoint = endpoints[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

// Complete-measurement records for one partition: fixed size, a known
// baseline-positive count, and a known number of follow-up events.
void fill_partition(Dataset& data, const std::string& cluster, const std::string& partition,
                    int arm, int n, int baseline_positives, int events) {
    for (int i = 0; i < n; ++i) {
        IndividualRecord r;
        r.cluster_id = cluster;
        r.partition_id = partition;
        r.individual_id = (i < 10 ? "i0" : "i") + std::to_string(i);
        r.arm = arm;
        r.sampled = 1;
        r.measured_baseline = 1;
        r.outcome_baseline = i < baseline_positives;
        if (!r.outcome_baseline) {
            r.measured_followup = 1;
            r.outcome_followup = i < baseline_positives + events;
        }
        data.records.push_back(std::move(r));
    }
}

AnalysisConfig unadjusted_config() {
    AnalysisConfig config;
    config.stage2_mode = Stage2Mode::unadjusted;
    return config;
}

}  // namespace

TEST_CASE("unadjusted effect is the contrast of arm means") {
    auto rows = make_rows({1, 1, 1, 1, 0, 0, 0, 0},
                          {0.06, 0.08, 0.10, 0.08, 0.10, 0.12, 0.14, 0.12});
    AnalysisConfig config = unadjusted_config();
    EffectEstimate rr = tmle_effect(rows, config);
    CHECK(std::abs(rr.phi1 - 0.08) < 1e-12);
    CHECK(std::abs(rr.phi0 - 0.12) < 1e-12);
    CHECK(std::abs(rr.point - 0.08 / 0.12) < 1e-10);
    REQUIRE(rr.log_point.has_value());
    CHECK(std::abs(*rr.log_point - std::log(0.08 / 0.12)) < 1e-10);
    CHECK(rr.n_units == 8);
    CHECK(rr.n_treated == 4);
    CHECK(rr.selection == "arm means, marginal treatment share");

    config.effect_scale = EffectScale::risk_difference;
    EffectEstimate rd = tmle_effect(rows, config);
    CHECK(std::abs(rd.point + 0.04) < 1e-12);
    CHECK_FALSE(rd.log_point.has_value());
    // Same counterfactual means on both scales in unadjusted mode.
    CHECK(rd.phi1 == rr.phi1);
    CHECK(rd.phi0 == rr.phi0);
}

TEST_CASE("unadjusted influence curve matches its closed form") {
    auto rows = make_rows({1, 1, 1, 1, 0, 0, 0, 0},
                          {0.06, 0.08, 0.10, 0.08, 0.10, 0.12, 0.14, 0.12});
    AnalysisConfig config = unadjusted_config();
    config.effect_scale = EffectScale::risk_difference;
    EffectEstimate rd = tmle_effect(rows, config);

    // With shared g = 1/2 and constant arm-mean predictions the difference
    // curve is 2 A (Y - phi1) - 2 (1 - A) (Y - phi0).
    REQUIRE(rd.ic_values.size() == 8);
    double ss = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        const auto& row = rows[i];  // unit ids are already sorted
        const double expected = row.arm == 1 ? 2.0 * (row.endpoint - 0.08)
                                             : -2.0 * (row.endpoint - 0.12);
        CHECK(std::abs(rd.ic_values[i] - expected) < 1e-12);
        ss += expected * expected;
    }
    CHECK(std::abs(rd.ic_mean) < 1e-14);
    const double se = std::sqrt(ss / 7.0 / 8.0);  // sample variance over K
    CHECK(rd.se == doctest::Approx(se).epsilon(1e-10));
    CHECK(rd.df_rule == "t(K-2)");
    CHECK(rd.ci_lower == doctest::Approx(rd.point - rd.ci_multiplier * rd.se).epsilon(1e-12));
    CHECK(rd.ci_upper == doctest::Approx(rd.point + rd.ci_multiplier * rd.se).epsilon(1e-12));

    // Ratio-scale curve rescales by the arm means.
    config.effect_scale = EffectScale::risk_ratio;
    EffectEstimate rr = tmle_effect(rows, config);
    for (std::size_t i = 0; i < 8; ++i) {
        const auto& row = rows[i];
        const double expected = row.arm == 1 ? 2.0 * (row.endpoint - 0.08) / 0.08
                                             : -2.0 * (row.endpoint - 0.12) / 0.12;
        CHECK(std::abs(rr.ic_values[i] - expected) < 1e-10);
    }
}

TEST_CASE("confidence multipliers switch from t to normal at 40 units") {
    CHECK(ci_multiplier_975(4) == doctest::Approx(4.302652729911).epsilon(1e-6));    // t, 2 df
    CHECK(ci_multiplier_975(18) == doctest::Approx(2.119905299221).epsilon(1e-6));   // t, 16 df
    CHECK(ci_multiplier_975(39) == doctest::Approx(2.026192463029).epsilon(1e-6));   // t, 37 df
    CHECK(ci_multiplier_975(40) == doctest::Approx(1.959963984540).epsilon(1e-9));   // normal
    CHECK(ci_multiplier_975(400) == doctest::Approx(1.959963984540).epsilon(1e-9));
    // Small samples always get the wider interval.
    CHECK(ci_multiplier_975(6) > ci_multiplier_975(20));
    CHECK(ci_multiplier_975(20) > ci_multiplier_975(40));
}

TEST_CASE("df rule follows the unit count") {
    std::vector<int> arms;
    std::vector<double> endpoints;
    for (int i = 0; i < 40; ++i) {
        arms.push_back(i % 2);
        endpoints.push_back(0.1 + 0.002 * i);
    }
    AnalysisConfig config = unadjusted_config();
    auto rows40 = make_rows(arms, endpoints);
    CHECK(tmle_effect(rows40, config).df_rule == "normal");
    arms.pop_back();
    endpoints.pop_back();
    auto rows39 = make_rows(arms, endpoints);
    EffectEstimate est = tmle_effect(rows39, config);
    CHECK(est.df_rule == "t(K-2)");
    CHECK(est.ci_multiplier == doctest::Approx(ci_multiplier_975(39)).epsilon(1e-12));
}

TEST_CASE("randomized mode targets the score equations") {
    std::vector<int> arms;
    std::vector<double> endpoints, w;
    for (int i = 0; i < 18; ++i) {
        arms.push_back(i % 2);
        w.push_back((i / 2) % 2);
        endpoints.push_back(0.08 + 0.05 * w.back() + 0.02 * arms.back() + 0.003 * (i % 5));
    }
    auto rows = make_rows(arms, endpoints, w);
    AnalysisConfig config;  // randomized by default
    EffectEstimate est = tmle_effect(rows, config);
    CHECK(est.max_score_residual < 1e-6);
    CHECK(std::abs(est.ic_mean) < 1e-8);
    CHECK(est.phi1 > 0.0);
    CHECK(est.phi1 < 1.0);
    CHECK(est.phi0 > 0.0);
    CHECK(est.phi0 < 1.0);
    CHECK(est.ci_lower < est.point);
    CHECK(est.point < est.ci_upper);
    CHECK(est.selection.rfind("aps: qbar=", 0) == 0);

    // Pseudo-observational mode solves the same equations with ensemble fits.
    config.stage2_mode = Stage2Mode::pseudo_observational;
    EffectEstimate obs = tmle_effect(rows, config);
    CHECK(obs.max_score_residual < 1e-6);
    CHECK(std::abs(obs.ic_mean) < 1e-8);
    CHECK(obs.selection.rfind("sl qbar over ", 0) == 0);
}

TEST_CASE("adaptive pre-specification prefers the informative outcome model") {
    std::vector<int> arms;
    std::vector<double> endpoints, w;
    for (int i = 0; i < 20; ++i) {
        arms.push_back(i % 2);
        w.push_back((i / 2) % 2);
        // Strong adjuster effect, mild arm effect, small unit wobble.
        endpoints.push_back(0.10 + 0.20 * w.back() + 0.03 * arms.back() + 0.004 * (i % 3));
    }
    auto rows = make_rows(arms, endpoints, w);
    AnalysisConfig config;

    std::vector<WorkingPair> pairs = {
        {{LearnerKind::main_terms_logistic, {"a"}}, {LearnerKind::intercept_only_mean, {}}},
        {{LearnerKind::main_terms_logistic, {"a", "w_w"}}, {LearnerKind::intercept_only_mean, {}}},
        {{LearnerKind::main_terms_logistic, {"a", "w_w"}},
         {LearnerKind::main_terms_logistic, {"w_w"}}},
    };
    ApsResult aps = adaptive_prespecification(rows, pairs, config);
    REQUIRE(aps.cv_ic_variance.size() == 3);
    CHECK(aps.folds_used == 20);  // leave-one-out below 40 units
    CHECK(aps.cv_ic_variance[1] < aps.cv_ic_variance[0]);
    CHECK(pairs[aps.selected].q_spec.covariates ==
          std::vector<std::string>{"a", "w_w"});
}

TEST_CASE("exact ties keep the earliest pair") {
    auto rows = make_rows({1, 0, 1, 0, 1, 0}, {0.1, 0.2, 0.15, 0.25, 0.12, 0.18},
                          {0, 0, 1, 1, 0, 1});
    AnalysisConfig config;
    WorkingPair pair = {{LearnerKind::main_terms_logistic, {"a"}},
                        {LearnerKind::intercept_only_mean, {}}};
    ApsResult aps = adaptive_prespecification(rows, {pair, pair, pair}, config);
    CHECK(aps.cv_ic_variance[0] == aps.cv_ic_variance[1]);
    CHECK(aps.selected == 0);
}

TEST_CASE("an all-zero adjuster changes nothing") {
    std::vector<int> arms;
    std::vector<double> endpoints, zero;
    for (int i = 0; i < 12; ++i) {
        arms.push_back(i % 2);
        zero.push_back(0.0);
        endpoints.push_back(0.05 + 0.01 * (i % 4) + 0.03 * (i % 2));
    }
    AnalysisConfig config;
    EffectEstimate with_zero = tmle_effect(make_rows(arms, endpoints, zero), config);
    EffectEstimate without = tmle_effect(make_rows(arms, endpoints), config);
    CHECK(std::abs(with_zero.point - without.point) < 1e-10);
    CHECK(std::abs(with_zero.se - without.se) < 1e-10);
    CHECK(std::abs(with_zero.phi1 - without.phi1) < 1e-10);
    CHECK(std::abs(with_zero.phi0 - without.phi0) < 1e-10);
}

TEST_CASE("input validation and estimation failures") {
    AnalysisConfig config = unadjusted_config();
    // Fewer than 4 units.
    CHECK_THROWS_AS(tmle_effect(make_rows({1, 0, 1}, {0.1, 0.2, 0.1}), config), EstimationError);
    // One arm only.
    CHECK_THROWS_AS(tmle_effect(make_rows({1, 1, 1, 1}, {0.1, 0.2, 0.1, 0.2}), config),
                    EstimationError);
    // Endpoint outside the unit interval.
    CHECK_THROWS_AS(tmle_effect(make_rows({1, 0, 1, 0}, {0.1, 0.2, 1.2, 0.2}), config),
                    ValidationError);
    // Ratio against a zero control mean.
    CHECK_THROWS_AS(tmle_effect(make_rows({1, 0, 1, 0}, {0.1, 0.0, 0.2, 0.0}), config),
                    EstimationError);
    // The same data works on the difference scale.
    config.effect_scale = EffectScale::risk_difference;
    CHECK_NOTHROW(tmle_effect(make_rows({1, 0, 1, 0}, {0.1, 0.0, 0.2, 0.0}), config));
    // Inconsistent adjuster columns.
    auto rows = make_rows({1, 0, 1, 0}, {0.1, 0.2, 0.1, 0.2}, {0, 1, 0, 1});
    rows[2].adjuster_names = {"other"};
    CHECK_THROWS_AS(tmle_effect(rows, config), ValidationError);
}

TEST_CASE("make_unit_rows clamps endpoints and checks alignment") {
    UnitData unit;
    unit.unit_id = "c1/p1";
    unit.arm = 1;
    unit.covariate_names = {"w_w"};
    unit.covariate_values = {1.0};
    EndpointEstimate est;
    est.unit_id = "c1/p1";
    est.endpoint = 1.02;  // numerically possible after division
    auto rows = make_unit_rows({unit}, {est});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].endpoint == 1.0);
    CHECK(rows[0].arm == 1);
    CHECK(rows[0].adjuster_names == std::vector<std::string>{"w_w"});

    est.unit_id = "c9/p9";
    CHECK_THROWS_AS(make_unit_rows({unit}, {est}), ValidationError);
    CHECK_THROWS_AS(make_unit_rows({unit}, {}), ValidationError);
}

TEST_CASE("estimate_endpoints is thread-count invariant") {
    Dataset data;
    for (int c = 0; c < 6; ++c) {
        const std::string cluster = "c" + std::to_string(c);
        fill_partition(data, cluster, "p1", c % 2, 30, 5, 3 + c % 3);
        fill_partition(data, cluster, "p2", c % 2, 30, 4, 2 + c % 4);
    }
    auto units = group_units(data, UnitLevel::partition);
    AnalysisConfig config;
    auto serial = estimate_endpoints(units, config, 1);
    auto parallel = estimate_endpoints(units, config, 4);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CHECK(serial[i].endpoint == parallel[i].endpoint);
        CHECK(serial[i].psi_den_hat == parallel[i].psi_den_hat);
    }
}

TEST_CASE("sensitivity grid produces the five pre-specified rows") {
    Dataset data;
    for (int c = 0; c < 8; ++c) {
        const std::string cluster = "c" + std::to_string(c);
        const int arm = c % 2;
        fill_partition(data, cluster, "p1", arm, 30, 5, 3 + (c % 3) + (arm ? 0 : 2));
        fill_partition(data, cluster, "p2", arm, 30, 4, 2 + (c % 4) + (arm ? 0 : 2));
    }
    AnalysisConfig config;
    auto grid = sensitivity_grid(data, config, 1);
    REQUIRE(grid.size() == 5);
    CHECK(grid[0].label == "stage 1 adjusted, stage 2 adjusted, partition units (primary)");
    CHECK(grid[1].label == "stage 1 adjusted, stage 2 adjusted, cluster units");
    CHECK(grid[2].label == "stage 1 adjusted, stage 2 unadjusted, partition units");
    CHECK(grid[3].label == "stage 1 unadjusted, stage 2 adjusted, partition units");
    CHECK(grid[4].label == "stage 1 unadjusted, stage 2 unadjusted, partition units");
    for (const auto& row : grid) {
        INFO(row.label << ": " << row.error);
        REQUIRE(row.effect.has_value());
        CHECK(row.error.empty());
        CHECK(row.effect->max_score_residual < 1e-6);
        CHECK(std::abs(row.effect->ic_mean) < 1e-8);
    }
    CHECK(grid[0].unit_level == UnitLevel::partition);
    CHECK(grid[1].unit_level == UnitLevel::cluster);
    CHECK(grid[0].effect->n_units == 16);
    CHECK(grid[1].effect->n_units == 8);
    CHECK(grid[0].stage2_mode == Stage2Mode::randomized);
    CHECK(grid[2].stage2_mode == Stage2Mode::unadjusted);
    CHECK_FALSE(grid[3].stage1_adjusted);
    // Missing-data assumptions weaken down the grid.
    CHECK(grid[0].assumptions.find("missing at random given") != std::string::npos);
    CHECK(grid[4].assumptions.find("missing completely at random") != std::string::npos);
}

TEST_CASE("a failing row does not poison the rest of the grid") {
    Dataset data;
    // Two clusters only: the cluster-level row cannot reach 4 units.
    for (int c = 0; c < 2; ++c) {
        const std::string cluster = "c" + std::to_string(c);
        fill_partition(data, cluster, "p1", c % 2, 30, 5, 3 + c);
        fill_partition(data, cluster, "p2", c % 2, 30, 4, 2 + c);
    }
    AnalysisConfig config;
    auto grid = sensitivity_grid(data, config, 1);
    REQUIRE(grid.size() == 5);
    CHECK_FALSE(grid[1].effect.has_value());
    CHECK(grid[1].error.find("at least 4 units") != std::string::npos);
    for (std::size_t i : {std::size_t{0}, std::size_t{2}, std::size_t{3}, std::size_t{4}}) {
        INFO(grid[i].label << ": " << grid[i].error);
        CHECK(grid[i].effect.has_value());
    }
}

TEST_CASE("one partition per cluster: partition and cluster analyses coincide") {
    Dataset data;
    for (int c = 0; c < 20; ++c) {
        const std::string cluster = (c < 10 ? "c0" : "c") + std::to_string(c);
        const int arm = c % 2;
        fill_partition(data, cluster, "p1", arm, 40, 5 + c % 3, 3 + (c % 4) + (arm ? 0 : 2));
    }
    AnalysisConfig config;
    auto grid = sensitivity_grid(data, config, 1);
    REQUIRE(grid[0].effect.has_value());
    REQUIRE(grid[1].effect.has_value());
    CHECK(grid[0].effect->n_units == 20);
    CHECK(grid[1].effect->n_units == 20);
    CHECK(std::abs(grid[0].effect->point - grid[1].effect->point) < 1e-10);
    CHECK(std::abs(grid[0].effect->se - grid[1].effect->se) < 1e-10);
    CHECK(std::abs(grid[0].effect->phi1 - grid[1].effect->phi1) < 1e-10);
}
