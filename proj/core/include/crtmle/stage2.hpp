#pragma once

#include "crtmle/stage1.hpp"

namespace crtmle {

// One analysis unit after Stage 1: endpoint in [0, 1] plus unit-level
// adjusters.
struct UnitRow {
    std::string unit_id;
    int arm = 0;
    std::vector<std::string> adjuster_names;
    std::vector<double> adjusters;
    double endpoint = 0.0;
};

struct EffectEstimate {
    double phi1 = 0.0;  // mean counterfactual endpoint, treated
    double phi0 = 0.0;  // mean counterfactual endpoint, control
    double point = 0.0;
    std::optional<double> log_point;  // ratio scale only
    double se = 0.0;     // on the inference scale (log for ratios)
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    EffectScale scale = EffectScale::risk_ratio;
    std::string df_rule;  // "t(K-2)" or "normal"
    double ci_multiplier = 0.0;
    std::vector<double> ic_values;  // per unit, canonical unit order, inference scale
    double ic_mean = 0.0;
    double max_score_residual = 0.0;
    std::string selection;  // human-readable description of the nuisance fits
    int n_units = 0;
    int n_treated = 0;
};

// Describes one candidate pair for adaptive pre-specification: an outcome
// working model and a treatment working model.
struct WorkingPair {
    LearnerSpec q_spec;
    LearnerSpec g_spec;
};

struct ApsResult {
    std::size_t selected = 0;  // index into pairs
    std::vector<double> cv_ic_variance;  // per pair, +inf when not evaluable
    int folds_used = 0;
};

// Cross-validated influence-curve variance minimization over candidate
// working-model pairs; leave-one-out folds below 40 units. Ties keep the
// earliest pair.
ApsResult adaptive_prespecification(const std::vector<UnitRow>& rows,
                                    const std::vector<WorkingPair>& pairs,
                                    const AnalysisConfig& config);

// Targeted estimate of the arm contrast between mean counterfactual unit
// endpoints, with influence-curve based small-sample inference.
EffectEstimate tmle_effect(const std::vector<UnitRow>& rows, const AnalysisConfig& config);

// Stage 1 across units (parallel over units, deterministic), then row
// construction for Stage 2.
std::vector<EndpointEstimate> estimate_endpoints(const std::vector<UnitData>& units,
                                                 const AnalysisConfig& config, int threads);
std::vector<UnitRow> make_unit_rows(const std::vector<UnitData>& units,
                                    const std::vector<EndpointEstimate>& endpoints);

struct SensitivityRow {
    std::string label;
    std::string assumptions;
    UnitLevel unit_level = UnitLevel::partition;
    bool stage1_adjusted = true;
    Stage2Mode stage2_mode = Stage2Mode::unadjusted;
    std::optional<EffectEstimate> effect;
    std::string error;  // nonempty when this row failed
};

// Five pre-specified analyses spanning the adjustment and unit-level
// choices, from most to least reliant on modeled missingness corrections.
std::vector<SensitivityRow> sensitivity_grid(const Dataset& data, const AnalysisConfig& config,
                                             int threads);

// 97.5 percent point of the CI multiplier reference distribution.
double ci_multiplier_975(int n_units);

}  // namespace crtmle
