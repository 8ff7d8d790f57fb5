#pragma once

#include <array>
#include <cstdint>

#include "crtmle/data_model.hpp"
#include "crtmle/rng.hpp"
#include "crtmle/stage2.hpp"

namespace crtmle {

enum class InterferenceMode { none, cross_partition };
std::string to_string(InterferenceMode mode);

// Hierarchical data-generating process. Every structural equation is
// logistic-linear in its parents and every variable is binary, so unit-level
// event rates have exact conditional forms. Generation order:
// cluster covariate e -> partition covariate w -> individual covariates
// (h, x) -> sampling s -> baseline outcome/measurement -> post-baseline z ->
// follow-up outcome/measurement. Arm coefficients are scaled by effect_size.
// The cross_partition mode additionally activates the direct cluster
// covariate terms and the neighbor terms (mean w of the cluster's other
// partitions), which break the partition-level factorization.
struct DgpConfig {
    int n_clusters = 9;
    int partitions_per_cluster = 2;
    int individuals_min = 400;
    int individuals_max = 400;
    double effect_size = 1.0;
    InterferenceMode interference = InterferenceMode::none;
    std::uint64_t seed = 1;

    double p_e = 0.5;  // cluster covariate prevalence

    double w_intercept = 0.0;  // partition covariate given e
    double w_e = 0.0;

    double h_intercept = 0.0;  // individual covariate given w
    double h_w = 0.0;

    double x_intercept = 0.0;  // individual covariate given (w, h)
    double x_h = 0.0;
    double x_w = 0.0;

    double s_intercept = 2.0;  // sub-sampling given (h, x)
    double s_h = 0.0;
    double s_x = 0.0;

    double y0_intercept = -2.0;  // baseline outcome given (h, x)
    double y0_h = 0.0;
    double y0_x = 0.0;

    double d0_intercept = 2.0;  // baseline measurement given (h, x), gated on s
    double d0_h = 0.0;
    double d0_x = 0.0;

    double z_intercept = 0.0;  // post-baseline covariate given (arm, h, x)
    double z_arm = 0.0;
    double z_h = 0.0;
    double z_x = 0.0;

    double y1_intercept = -2.0;  // follow-up outcome given (arm, z, h, x)
    double y1_arm = 0.0;
    double y1_z = 0.0;
    double y1_h = 0.0;
    double y1_x = 0.0;

    double d1_intercept = 2.0;  // follow-up measurement given (z, h), cohort only
    double d1_z = 0.0;
    double d1_h = 0.0;

    // active only under cross_partition
    double y0_e = 0.0;
    double y1_e = 0.0;
    double z_neighbor = 0.0;
    double y1_neighbor = 0.0;
};

void validate_dgp(const DgpConfig& dgp);

// The default demonstration process: a harmful exposure z that treatment
// suppresses, measurement and sampling both enriched on risk, calibrated so
// that ignoring the measurement mechanism reverses the direction of the
// estimated effect.
DgpConfig example_dgp();

// Exact event rates for one covariate cell, conditional on unit structure.
struct CellRates {
    double baseline_positive = 0.0;  // P(baseline outcome = 1)
    double at_risk = 0.0;            // 1 - baseline_positive
    double incident = 0.0;           // P(baseline 0, follow-up 1)
};

CellRates cell_rates(const DgpConfig& dgp, int arm, int w, int e, double neighbor_w);

// Per-partition exogenous stream, split so that the partition covariate is
// available before outcomes are drawn (cross_partition needs every w in the
// cluster first).
struct PartitionFrame {
    int w = 0;
    int n_individuals = 0;
    Rng stream;
};

PartitionFrame draw_partition_frame(const DgpConfig& dgp, int e, std::uint64_t stream_seed);

// Draws the partition's individual records from the frame's remaining
// stream. Under interference none the result depends only on
// (dgp, e, arm, frame), never on neighbor_w. force_measurement short-circuits
// the coarsening (s = d0 = 1, d1 = 1 for the at-risk) without changing any
// latent draw.
std::vector<IndividualRecord> draw_partition_members(const DgpConfig& dgp, PartitionFrame& frame,
                                                     int arm, int e, double neighbor_w,
                                                     bool force_measurement);

std::uint64_t partition_stream_seed(const DgpConfig& dgp, int cluster_index, int partition_index);

// Complete draw of the trial: covariates top-down, complete randomization of
// clusters (half treated, odd counts broken by a seeded coin), observed-data
// coarsening unless force_measurement. Bit-identical for identical configs.
Dataset generate(const DgpConfig& dgp, bool force_measurement = false);

// Counterfactual parameters at a chosen unit level under equal unit
// weighting: each unit contributes its conditional event rates, and the
// endpoint is the unit's incident share among its expected at-risk members.
struct TruthReport {
    UnitLevel level = UnitLevel::partition;
    std::array<double, 2> psi_den{};   // baseline-positive share by arm
    std::array<double, 2> psi_num{};   // incident share by arm
    std::array<double, 2> endpoint{};  // psi_num / (1 - psi_den), unit averaged
    double rr = 1.0;
    double rd = 0.0;
    std::int64_t mc_unit_draws = 0;   // 0 when computed by exact enumeration
    std::int64_t mc_individuals = 0;
    std::array<double, 2> mc_se_endpoint{};
    double mc_se_rd = 0.0;
    double mc_se_log_rr = 0.0;
    double mc_se = 0.0;  // max endpoint standard error
};

// Monte Carlo over unit draws with both arms applied to the same exogenous
// structure; standard errors from 10 replicate batches. cluster_draws must
// cover at least 1e5 individuals in expectation.
TruthReport true_parameters(const DgpConfig& dgp, std::int64_t cluster_draws, UnitLevel level);

// Exact enumeration over the discrete unit structure. Requires interference
// none and a fixed partition size.
TruthReport closed_form_parameters(const DgpConfig& dgp, UnitLevel level);

// Repeated generate-and-analyze cycles under per-replicate derived seeds.
struct OperatingRow {
    std::string label;
    UnitLevel level = UnitLevel::partition;
    EffectScale scale = EffectScale::risk_ratio;
    double truth = 0.0;  // inference scale: log for ratios
    int n_reps = 0;
    int n_fail = 0;
    double bias = 0.0;       // mean point minus truth, inference scale
    double mean_point = 0.0;
    double emp_se = 0.0;
    double mean_se = 0.0;
    double coverage = 0.0;   // CI covers the truth
    double rejection = 0.0;  // CI excludes the null
    double mean_ci_width = 0.0;  // inference scale
};

struct ReplicateStudy {
    std::vector<OperatingRow> rows;      // one per analysis config
    std::vector<TruthReport> truths;     // level-matched, one per config
    std::vector<std::vector<double>> points;  // inference-scale estimates per config, failures skipped
};

ReplicateStudy replicate_study(const DgpConfig& dgp, const std::vector<AnalysisConfig>& configs,
                               const std::vector<std::string>& labels, int n_reps, int threads,
                               std::int64_t truth_cluster_draws = 200000);

}  // namespace crtmle
