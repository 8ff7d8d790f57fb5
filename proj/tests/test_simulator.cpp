// The hierarchical draw, its coarsening, and the truth machinery.

#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "crtmle/simulator.hpp"
#include "crtmle/stage2.hpp"

using namespace crtmle;

namespace {

DgpConfig small_dgp() {
    DgpConfig dgp;
    dgp.n_clusters = 6;
    dgp.partitions_per_cluster = 2;
    dgp.individuals_min = 50;
    dgp.individuals_max = 50;
    dgp.seed = 404;
    dgp.w_e = 0.8;
    dgp.h_w = 0.9;
    dgp.x_h = 0.5;
    dgp.s_intercept = 1.0;
    dgp.s_h = 0.7;
    dgp.y0_intercept = -1.8;
    dgp.y0_h = 0.8;
    dgp.d0_intercept = 1.5;
    dgp.d0_h = -0.6;
    dgp.z_arm = -1.5;
    dgp.z_h = 0.5;
    dgp.y1_intercept = -2.2;
    dgp.y1_z = 1.4;
    dgp.y1_h = 0.6;
    dgp.d1_intercept = 1.8;
    dgp.d1_z = -1.0;
    return dgp;
}

}  // namespace

TEST_CASE("generate produces the advertised shape") {
    DgpConfig dgp;
    dgp.seed = 11;
    Dataset data = generate(dgp);  // 9 clusters x 2 partitions x 400
    CHECK(data.records.size() == 7200);
    CHECK(data.l0_names == std::vector<std::string>{"l0_h", "l0_x"});
    CHECK(data.l1_names == std::vector<std::string>{"l1_z"});
    CHECK(data.w_names == std::vector<std::string>{"w_w"});
    CHECK(data.e_names == std::vector<std::string>{"e_e"});

    std::map<std::string, int> arm_by_cluster;
    std::set<std::string> partitions;
    for (const auto& r : data.records) {
        arm_by_cluster[r.cluster_id] = r.arm;
        partitions.insert(r.cluster_id + "/" + r.partition_id);
    }
    CHECK(arm_by_cluster.size() == 9);
    CHECK(partitions.size() == 18);
    int treated = 0;
    for (const auto& [id, arm] : arm_by_cluster) treated += arm;
    // Complete randomization of an odd count: half rounded either way.
    CHECK(treated >= 4);
    CHECK(treated <= 5);

    // The output parses and groups cleanly.
    Dataset reparsed = parse_csv(emit_csv(data));
    CHECK(reparsed == data);
    CHECK(group_units(data, UnitLevel::partition).size() == 18);
    CHECK(group_units(data, UnitLevel::cluster).size() == 9);
}

TEST_CASE("generate is bit-deterministic in the seed") {
    DgpConfig dgp = small_dgp();
    CHECK(emit_csv(generate(dgp)) == emit_csv(generate(dgp)));
    DgpConfig other = dgp;
    other.seed += 1;
    CHECK(emit_csv(generate(other)) != emit_csv(generate(dgp)));
}

TEST_CASE("partition sizes respect the configured range") {
    DgpConfig dgp = small_dgp();
    dgp.individuals_min = 30;
    dgp.individuals_max = 60;
    Dataset data = generate(dgp);
    std::map<std::string, int> sizes;
    for (const auto& r : data.records) sizes[r.cluster_id + "/" + r.partition_id]++;
    bool varied = false;
    int first = sizes.begin()->second;
    for (const auto& [id, n] : sizes) {
        CHECK(n >= 30);
        CHECK(n <= 60);
        varied |= n != first;
    }
    CHECK(varied);
}

TEST_CASE("forcing measurement keeps every latent draw") {
    DgpConfig dgp = small_dgp();
    Dataset observed = generate(dgp, false);
    Dataset forced = generate(dgp, true);
    REQUIRE(observed.records.size() == forced.records.size());
    int hidden = 0;
    for (std::size_t i = 0; i < observed.records.size(); ++i) {
        const auto& o = observed.records[i];
        const auto& f = forced.records[i];
        CHECK(o.cluster_id == f.cluster_id);
        CHECK(o.individual_id == f.individual_id);
        CHECK(o.arm == f.arm);
        CHECK(o.l0 == f.l0);
        CHECK(o.l1 == f.l1);
        CHECK(f.sampled == 1);
        CHECK(f.measured_baseline == 1);
        CHECK(f.measured_followup == (f.outcome_baseline == 0 ? 1 : 0));
        // Wherever the observed data did measure, the values agree.
        if (o.measured_baseline == 1) CHECK(o.outcome_baseline == f.outcome_baseline);
        if (o.measured_followup == 1) CHECK(o.outcome_followup == f.outcome_followup);
        hidden += o.measured_baseline == 0;
    }
    CHECK(hidden > 0);  // the coarsening actually hides something here
}

TEST_CASE("interference off means neighbors are ignored") {
    DgpConfig dgp = small_dgp();
    const std::uint64_t seed = partition_stream_seed(dgp, 2, 1);
    PartitionFrame a = draw_partition_frame(dgp, 1, seed);
    PartitionFrame b = draw_partition_frame(dgp, 1, seed);
    CHECK(a.w == b.w);
    CHECK(a.n_individuals == b.n_individuals);
    auto members_a = draw_partition_members(dgp, a, 1, 1, 0.0, false);
    auto members_b = draw_partition_members(dgp, b, 1, 1, 1.0, false);
    CHECK(members_a == members_b);

    DgpConfig cross = dgp;
    cross.interference = InterferenceMode::cross_partition;
    cross.z_neighbor = 1.5;
    PartitionFrame c = draw_partition_frame(cross, 1, seed);
    PartitionFrame d = draw_partition_frame(cross, 1, seed);
    auto members_c = draw_partition_members(cross, c, 1, 1, 0.0, false);
    auto members_d = draw_partition_members(cross, d, 1, 1, 1.0, false);
    CHECK(members_c != members_d);
}

TEST_CASE("adding a cluster leaves earlier clusters untouched") {
    DgpConfig dgp = small_dgp();
    DgpConfig bigger = dgp;
    bigger.n_clusters = 7;
    auto pick = [](const Dataset& data, const std::string& cluster) {
        std::vector<IndividualRecord> out;
        for (const auto& r : data.records) {
            if (r.cluster_id == cluster) out.push_back(r);
        }
        return out;
    };
    Dataset base = generate(dgp);
    Dataset extended = generate(bigger);
    // Covariate and outcome streams are keyed per partition, so cluster c2's
    // exogenous draws match; only the randomized arm may differ.
    auto a = pick(base, "c2");
    auto b = pick(extended, "c2");
    REQUIRE(a.size() > 0);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].l0 == b[i].l0);
        CHECK(a[i].w == b[i].w);
        CHECK(a[i].e == b[i].e);
    }
}

TEST_CASE("zero effect size yields a null truth exactly") {
    DgpConfig dgp = small_dgp();
    dgp.effect_size = 0.0;
    TruthReport truth = closed_form_parameters(dgp, UnitLevel::partition);
    CHECK(truth.rr == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(truth.rd == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(truth.endpoint[0] == truth.endpoint[1]);
}

TEST_CASE("a flat follow-up equation pins the endpoint") {
    DgpConfig dgp;
    dgp.n_clusters = 4;
    dgp.individuals_min = dgp.individuals_max = 100;
    dgp.y0_intercept = -40.0;         // essentially nobody baseline-positive
    dgp.y1_intercept = logit(0.1);    // flat 10 percent incidence
    dgp.y1_arm = 0.0;
    TruthReport truth = closed_form_parameters(dgp, UnitLevel::partition);
    CHECK(truth.endpoint[0] == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(truth.endpoint[1] == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(truth.psi_den[0] < 1e-12);
}

TEST_CASE("closed form and monte carlo truths agree") {
    DgpConfig dgp = small_dgp();
    for (auto level : {UnitLevel::partition, UnitLevel::cluster}) {
        TruthReport exact = closed_form_parameters(dgp, level);
        TruthReport mc = true_parameters(dgp, 2000, level);
        CHECK(mc.mc_individuals >= 100000);
        for (int arm : {0, 1}) {
            const double tol = 3.0 * mc.mc_se_endpoint[static_cast<std::size_t>(arm)];
            INFO("level " << to_string(level) << " arm " << arm << " tol " << tol);
            CHECK(std::abs(exact.endpoint[static_cast<std::size_t>(arm)] -
                           mc.endpoint[static_cast<std::size_t>(arm)]) < tol);
        }
        CHECK(std::abs(std::log(exact.rr) - std::log(mc.rr)) < 3.0 * mc.mc_se_log_rr);
        CHECK(std::abs(exact.rd - mc.rd) < 3.0 * mc.mc_se_rd);
    }
}

TEST_CASE("cluster and partition truths differ under heterogeneity") {
    DgpConfig dgp = small_dgp();
    dgp.w_e = 2.0;  // strong partition heterogeneity within clusters
    TruthReport partition = closed_form_parameters(dgp, UnitLevel::partition);
    TruthReport cluster = closed_form_parameters(dgp, UnitLevel::cluster);
    // A cluster endpoint pools its partitions before taking the ratio, a
    // partition endpoint averages the per-partition ratios.
    CHECK(partition.endpoint[0] != doctest::Approx(cluster.endpoint[0]).epsilon(1e-12));
    // Variable partition sizes have no closed cluster form.
    DgpConfig varied = dgp;
    varied.individuals_max = varied.individuals_min + 50;
    CHECK_THROWS_AS(closed_form_parameters(varied, UnitLevel::cluster), ValidationError);
    CHECK_NOTHROW(closed_form_parameters(varied, UnitLevel::partition));
}

TEST_CASE("truth draws must cover enough individuals") {
    DgpConfig dgp = small_dgp();
    CHECK_THROWS_AS(true_parameters(dgp, 100, UnitLevel::partition), ValidationError);
}

TEST_CASE("validate_dgp rejects broken settings") {
    DgpConfig dgp;
    dgp.n_clusters = 1;
    CHECK_THROWS_AS(validate_dgp(dgp), ValidationError);
    dgp = DgpConfig{};
    dgp.individuals_min = 0;
    CHECK_THROWS_AS(validate_dgp(dgp), ValidationError);
    dgp = DgpConfig{};
    dgp.individuals_min = 50;
    dgp.individuals_max = 40;
    CHECK_THROWS_AS(validate_dgp(dgp), ValidationError);
    dgp = DgpConfig{};
    dgp.p_e = 1.5;
    CHECK_THROWS_AS(validate_dgp(dgp), ValidationError);
    dgp = DgpConfig{};
    dgp.effect_size = std::nan("");
    CHECK_THROWS_AS(validate_dgp(dgp), ValidationError);
    dgp = DgpConfig{};
    dgp.partitions_per_cluster = 0;
    CHECK_THROWS_AS(validate_dgp(dgp), ValidationError);
}

TEST_CASE("the built-in example process is internally consistent") {
    DgpConfig dgp = example_dgp();
    CHECK_NOTHROW(validate_dgp(dgp));
    Dataset data = generate(dgp);
    CHECK(data.records.size() > 0);
    TruthReport truth = closed_form_parameters(dgp, UnitLevel::partition);
    CHECK(truth.rr > 0.0);
    CHECK(truth.rr < 1.0);  // protective effect
    CHECK(truth.endpoint[0] > 0.01);
    CHECK(truth.endpoint[1] > 0.005);
}

TEST_CASE("replicate_study reports coherent operating characteristics") {
    DgpConfig dgp = small_dgp();
    dgp.n_clusters = 8;
    dgp.individuals_min = dgp.individuals_max = 60;
    AnalysisConfig adjusted;
    AnalysisConfig unadjusted;
    unadjusted.stage1_unadjusted = true;
    unadjusted.stage2_mode = Stage2Mode::unadjusted;
    ReplicateStudy study =
        replicate_study(dgp, {adjusted, unadjusted}, {"adjusted", "unadjusted"}, 12, 1, 2000);
    REQUIRE(study.rows.size() == 2);
    REQUIRE(study.truths.size() == 2);
    REQUIRE(study.points.size() == 2);
    for (const auto& row : study.rows) {
        INFO(row.label);
        CHECK(row.n_reps == 12);
        CHECK(row.n_fail >= 0);
        CHECK(row.coverage >= 0.0);
        CHECK(row.coverage <= 1.0);
        CHECK(row.rejection >= 0.0);
        CHECK(row.rejection <= 1.0);
        CHECK(row.emp_se > 0.0);
        CHECK(row.mean_se > 0.0);
        CHECK(row.mean_ci_width > 0.0);
        CHECK(std::isfinite(row.bias));
    }
    CHECK(study.rows[0].label == "adjusted");
    CHECK(study.points[0].size() ==
          static_cast<std::size_t>(study.rows[0].n_reps - study.rows[0].n_fail));
    // bias is mean point minus truth on the inference scale
    double mean = 0.0;
    for (double p : study.points[0]) mean += p;
    mean /= static_cast<double>(study.points[0].size());
    CHECK(study.rows[0].bias ==
          doctest::Approx(mean - study.rows[0].truth).epsilon(1e-12));

    // Same study again: identical numbers.
    ReplicateStudy again =
        replicate_study(dgp, {adjusted, unadjusted}, {"adjusted", "unadjusted"}, 12, 1, 2000);
    CHECK(again.rows[0].bias == study.rows[0].bias);
    CHECK(again.rows[1].coverage == study.rows[1].coverage);
    CHECK(again.points == study.points);
}

TEST_CASE("replicate_study is thread-count invariant") {
    DgpConfig dgp = small_dgp();
    dgp.n_clusters = 6;
    dgp.individuals_min = dgp.individuals_max = 40;
    AnalysisConfig config;
    config.stage1_unadjusted = true;
    config.stage2_mode = Stage2Mode::unadjusted;
    ReplicateStudy serial = replicate_study(dgp, {config}, {"raw"}, 8, 1, 2000);
    ReplicateStudy parallel = replicate_study(dgp, {config}, {"raw"}, 8, 4, 2000);
    CHECK(serial.points == parallel.points);
    CHECK(serial.rows[0].bias == parallel.rows[0].bias);
}
