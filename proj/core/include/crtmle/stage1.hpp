#pragma once

#include <optional>

#include "crtmle/super_learner.hpp"

namespace crtmle {

// Per-unit endpoint: estimated incidence among members who were
// outcome-free at baseline, corrected for sub-sampling and for missing
// outcome measurements at both timepoints.
struct EndpointEstimate {
    std::string unit_id;
    double psi_den_hat = 0.0;  // baseline-positive share among all members
    double psi_num_hat = 0.0;  // joint share: baseline-negative and follow-up-positive
    double endpoint = 0.0;     // psi_num_hat / (1 - psi_den_hat)
    int n_individuals = 0;
    int n_sampled = 0;
    int n_measured_baseline = 0;
    int n_cohort = 0;
    int n_measured_followup = 0;
    std::optional<double> min_measurement_prob;  // smallest mechanism estimate before bounding
    int n_gbound_activations = 0;
    bool adjusted = true;
    double max_score_residual = 0.0;  // across performed targeting steps
    std::vector<std::string> flags;
};

struct Stage1Options {
    std::vector<std::string> adjustment;       // baseline covariates
    std::vector<std::string> adjustment_post;  // post-baseline covariates
    double g_bound = 0.025;
    int cv_folds = 10;
    SlLoss loss = SlLoss::log_loss;
    std::uint64_t seed = 20240801;
    std::vector<LearnerKind> candidate_kinds = {
        LearnerKind::intercept_only_mean,
        LearnerKind::main_terms_logistic,
        LearnerKind::saturated_logistic,
    };
};

Stage1Options stage1_options(const AnalysisConfig& config);

// Candidate specs for the given covariate set: one spec per requested kind
// that applies (saturated needs 1-4 columns, all binary in X). Empty
// covariate sets collapse to the weighted mean.
std::vector<LearnerSpec> build_candidates(const std::vector<LearnerKind>& kinds,
                                          const std::vector<std::string>& covariates,
                                          const NamedMatrix& X);

struct Stage1Part {
    double estimate = 0.0;
    double min_mechanism_prob = 1.0;
    int n_gbound_activations = 0;
    double max_score_residual = 0.0;
    std::vector<std::string> flags;
};

// Targeted estimate of the baseline-positive share among all unit members.
// Ensemble outcome regression among the measured, ensemble joint measurement
// mechanism, one weighted intercept fluctuation.
Stage1Part tmle_denominator_detail(const UnitData& unit, const Stage1Options& options);
double tmle_denominator(const UnitData& unit, const Stage1Options& options);

// Targeted estimate of the joint share (baseline-negative and
// follow-up-positive) via iterated conditional expectations over the two
// measurement stages. Members observed positive at baseline contribute a
// deterministic zero.
Stage1Part tmle_numerator_detail(const UnitData& unit, const Stage1Options& options);
double tmle_numerator(const UnitData& unit, const Stage1Options& options);

// Composes the two parts (or raw proportions when
// config.stage1_unadjusted) into the unit endpoint.
EndpointEstimate estimate_endpoint(const UnitData& unit, const AnalysisConfig& config);

// Covariate matrices for a unit's records, columns named after the source
// columns. Used by the estimators and exposed for tests.
NamedMatrix baseline_matrix(const UnitData& unit);
NamedMatrix full_matrix(const UnitData& unit);  // baseline plus post-baseline columns

}  // namespace crtmle
