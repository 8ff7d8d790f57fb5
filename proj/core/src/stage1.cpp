#include "crtmle/stage1.hpp"

#include <algorithm>
#include <cmath>

#include "crtmle/rng.hpp"

namespace crtmle {

Stage1Options stage1_options(const AnalysisConfig& config) {
    Stage1Options options;
    options.adjustment = config.stage1_adjustment;
    options.adjustment_post = config.stage1_adjustment_post;
    options.g_bound = config.g_bound;
    options.cv_folds = config.cv_folds;
    options.seed = config.seed;
    return options;
}

std::vector<LearnerSpec> build_candidates(const std::vector<LearnerKind>& kinds,
                                          const std::vector<std::string>& covariates,
                                          const NamedMatrix& X) {
    std::vector<LearnerSpec> specs;
    bool have_mean = false;
    auto all_binary = [&]() {
        const auto cols = X.find(covariates);
        for (Eigen::Index j : cols) {
            for (Eigen::Index i = 0; i < X.rows(); ++i) {
                const double v = X.values(i, j);
                if (v != 0.0 && v != 1.0) return false;
            }
        }
        return true;
    };
    for (LearnerKind kind : kinds) {
        switch (kind) {
            case LearnerKind::intercept_only_mean:
                if (!have_mean) specs.push_back({kind, {}});
                have_mean = true;
                break;
            case LearnerKind::main_terms_logistic:
            case LearnerKind::main_terms_linear:
                if (covariates.empty()) {
                    if (!have_mean) specs.push_back({LearnerKind::intercept_only_mean, {}});
                    have_mean = true;
                } else {
                    specs.push_back({kind, covariates});
                }
                break;
            case LearnerKind::saturated_logistic:
                if (!covariates.empty() && covariates.size() <= 4 && all_binary()) {
                    specs.push_back({kind, covariates});
                }
                break;
        }
    }
    if (specs.empty()) throw ValidationError("no applicable candidate learners");
    return specs;
}

NamedMatrix baseline_matrix(const UnitData& unit) {
    NamedMatrix X;
    X.names = unit.l0_names;
    X.values.resize(static_cast<Eigen::Index>(unit.records.size()),
                    static_cast<Eigen::Index>(unit.l0_names.size()));
    for (std::size_t i = 0; i < unit.records.size(); ++i) {
        for (std::size_t j = 0; j < unit.l0_names.size(); ++j) {
            X.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = unit.records[i].l0[j];
        }
    }
    return X;
}

NamedMatrix full_matrix(const UnitData& unit) {
    NamedMatrix X;
    X.names = unit.l0_names;
    X.names.insert(X.names.end(), unit.l1_names.begin(), unit.l1_names.end());
    const auto p0 = static_cast<Eigen::Index>(unit.l0_names.size());
    X.values.resize(static_cast<Eigen::Index>(unit.records.size()),
                    p0 + static_cast<Eigen::Index>(unit.l1_names.size()));
    for (std::size_t i = 0; i < unit.records.size(); ++i) {
        for (std::size_t j = 0; j < unit.l0_names.size(); ++j) {
            X.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = unit.records[i].l0[j];
        }
        for (std::size_t j = 0; j < unit.l1_names.size(); ++j) {
            X.values(static_cast<Eigen::Index>(i), p0 + static_cast<Eigen::Index>(j)) = unit.records[i].l1[j];
        }
    }
    return X;
}

namespace {

bool all_equal(const Eigen::VectorXd& v) {
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        if (v[i] != v[0]) return false;
    }
    return true;
}

Eigen::VectorXd logit_vector(const Eigen::VectorXd& p) {
    Eigen::VectorXd out(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) out[i] = logit(clip_prob(p[i]));
    return out;
}

struct Fluctuation {
    double epsilon = 0.0;
    bool performed = false;
    bool converged = true;
    double score = 0.0;
};

// Weighted intercept-only logistic update of initial predictions toward the
// observed responses; solves sum w (y - expit(eps + logit(q))) = 0.
Fluctuation fluctuate(const Eigen::VectorXd& y, const Eigen::VectorXd& initial,
                      const Eigen::VectorXd& weights) {
    Fluctuation out;
    if (y.size() == 0 || all_equal(y)) return out;
    Eigen::MatrixXd design = Eigen::MatrixXd::Ones(y.size(), 1);
    Eigen::VectorXd offset = logit_vector(initial);
    GlmFit fit = fit_logistic_design(design, y, weights, offset);
    out.epsilon = fit.beta[0];
    out.performed = true;
    out.converged = fit.converged;
    out.score = score_residual(design, y, weights, offset, fit.beta);
    return out;
}

Eigen::VectorXd apply_fluctuation(const Eigen::VectorXd& initial, double epsilon) {
    Eigen::VectorXd out(initial.size());
    for (Eigen::Index i = 0; i < initial.size(); ++i) {
        out[i] = expit(epsilon + logit(clip_prob(initial[i])));
    }
    return out;
}

struct MechanismFit {
    Eigen::VectorXd bounded;  // predictions truncated below at g_bound
    double min_raw = 1.0;
    int n_bounded = 0;
};

MechanismFit bound_mechanism(const Eigen::VectorXd& raw, double g_bound) {
    MechanismFit out;
    out.bounded = raw;
    out.min_raw = raw.minCoeff();
    for (Eigen::Index i = 0; i < raw.size(); ++i) {
        if (raw[i] < g_bound) {
            out.bounded[i] = g_bound;
            ++out.n_bounded;
        }
    }
    return out;
}

Eigen::VectorXd ensemble_regression(const NamedMatrix& x_fit, const Eigen::VectorXd& y_fit,
                                    const NamedMatrix& x_predict,
                                    const std::vector<std::string>& covariates,
                                    const Stage1Options& options, const char* salt) {
    const auto candidates = build_candidates(options.candidate_kinds, covariates, x_predict);
    EnsembleFit fit = sl_fit(x_fit, y_fit, Eigen::VectorXd::Ones(x_fit.rows()), candidates,
                             options.cv_folds, options.loss, mix_seed(options.seed, std::string(salt)));
    return sl_predict(fit, x_predict);
}

std::vector<Eigen::Index> which(const std::vector<char>& mask) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) idx.push_back(static_cast<Eigen::Index>(i));
    }
    return idx;
}

}  // namespace

Stage1Part tmle_denominator_detail(const UnitData& unit, const Stage1Options& options) {
    const std::size_t n = unit.records.size();
    if (n == 0) throw EstimationError("unit " + unit.unit_id + " has no members");
    NamedMatrix x0 = baseline_matrix(unit);

    std::vector<char> measured(n);
    Eigen::VectorXd y0(static_cast<Eigen::Index>(n)), m(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = unit.records[i];
        measured[i] = r.sampled == 1 && r.measured_baseline == 1;
        m[static_cast<Eigen::Index>(i)] = measured[i] ? 1.0 : 0.0;
        y0[static_cast<Eigen::Index>(i)] = r.outcome_baseline;
    }
    const auto meas_idx = which(measured);
    if (meas_idx.empty()) {
        throw EstimationError("unit " + unit.unit_id + ": no baseline outcome measurements");
    }

    Stage1Part part;
    NamedMatrix x_meas{x0.values(meas_idx, Eigen::all), x0.names};
    Eigen::VectorXd q_all = ensemble_regression(x_meas, y0(meas_idx), x0, options.adjustment,
                                                options, "stage1/den/outcome");
    Eigen::VectorXd g_raw = ensemble_regression(x0, m, x0, options.adjustment,
                                                options, "stage1/den/mechanism");
    MechanismFit g = bound_mechanism(g_raw, options.g_bound);
    part.min_mechanism_prob = g.min_raw;
    part.n_gbound_activations = g.n_bounded;

    Eigen::VectorXd h(static_cast<Eigen::Index>(meas_idx.size()));
    for (std::size_t k = 0; k < meas_idx.size(); ++k) h[static_cast<Eigen::Index>(k)] = 1.0 / g.bounded[meas_idx[k]];

    Fluctuation fluct = fluctuate(y0(meas_idx), q_all(meas_idx), h);
    if (!fluct.performed) {
        part.flags.push_back("degenerate_baseline_outcome");
    } else {
        part.max_score_residual = fluct.score;
        if (!fluct.converged) part.flags.push_back("baseline_fluctuation_not_converged");
    }
    Eigen::VectorXd targeted = apply_fluctuation(q_all, fluct.epsilon);
    part.estimate = targeted.mean();
    return part;
}

double tmle_denominator(const UnitData& unit, const Stage1Options& options) {
    return tmle_denominator_detail(unit, options).estimate;
}

Stage1Part tmle_numerator_detail(const UnitData& unit, const Stage1Options& options) {
    const std::size_t n = unit.records.size();
    if (n == 0) throw EstimationError("unit " + unit.unit_id + " has no members");
    NamedMatrix x0 = baseline_matrix(unit);
    NamedMatrix x01 = full_matrix(unit);

    std::vector<char> meas0(n), cohort(n), meas1(n);
    Eigen::VectorXd m0(static_cast<Eigen::Index>(n));
    Eigen::VectorXd y1(static_cast<Eigen::Index>(n)), d1(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = unit.records[i];
        meas0[i] = r.sampled == 1 && r.measured_baseline == 1;
        cohort[i] = r.measured_baseline == 1 && r.outcome_baseline == 0;
        meas1[i] = cohort[i] && r.measured_followup == 1;
        m0[static_cast<Eigen::Index>(i)] = meas0[i] ? 1.0 : 0.0;
        d1[static_cast<Eigen::Index>(i)] = r.measured_followup;
        y1[static_cast<Eigen::Index>(i)] = r.outcome_followup;
    }
    const auto meas0_idx = which(meas0);
    const auto cohort_idx = which(cohort);
    const auto meas1_idx = which(meas1);
    if (meas0_idx.empty()) {
        throw EstimationError("unit " + unit.unit_id + ": no baseline outcome measurements");
    }
    if (cohort_idx.empty()) {
        throw EstimationError("unit " + unit.unit_id + ": incidence cohort is empty");
    }
    if (meas1_idx.empty()) {
        throw EstimationError("unit " + unit.unit_id + ": no cohort member measured at follow-up");
    }

    std::vector<std::string> inner_covariates = options.adjustment_post;
    inner_covariates.insert(inner_covariates.end(), options.adjustment.begin(),
                            options.adjustment.end());

    Stage1Part part;

    // innermost outcome regression among cohort members measured at follow-up
    NamedMatrix x_meas1{x01.values(meas1_idx, Eigen::all), x01.names};
    Eigen::VectorXd q1_all = ensemble_regression(x_meas1, y1(meas1_idx), x01, inner_covariates,
                                                 options, "stage1/num/outcome");

    // joint baseline measurement mechanism over all members
    Eigen::VectorXd g0_raw = ensemble_regression(x0, m0, x0, options.adjustment,
                                                 options, "stage1/num/mechanism0");
    MechanismFit g0 = bound_mechanism(g0_raw, options.g_bound);

    // follow-up measurement mechanism among the cohort
    NamedMatrix x_cohort{x01.values(cohort_idx, Eigen::all), x01.names};
    Eigen::VectorXd g1_cohort_raw = ensemble_regression(x_cohort, d1(cohort_idx), x_cohort,
                                                        inner_covariates, options,
                                                        "stage1/num/mechanism1");
    MechanismFit g1 = bound_mechanism(g1_cohort_raw, options.g_bound);
    part.min_mechanism_prob = std::min(g0.min_raw, g1.min_raw);
    part.n_gbound_activations = g0.n_bounded + g1.n_bounded;

    // map record index -> position in cohort vector
    std::vector<Eigen::Index> cohort_pos(n, -1);
    for (std::size_t k = 0; k < cohort_idx.size(); ++k) cohort_pos[static_cast<std::size_t>(cohort_idx[k])] = static_cast<Eigen::Index>(k);

    Eigen::VectorXd h1(static_cast<Eigen::Index>(meas1_idx.size()));
    for (std::size_t k = 0; k < meas1_idx.size(); ++k) {
        const Eigen::Index i = meas1_idx[k];
        h1[static_cast<Eigen::Index>(k)] = 1.0 / (g0.bounded[i] * g1.bounded[cohort_pos[static_cast<std::size_t>(i)]]);
    }

    bool zero_events = true;
    for (Eigen::Index i : meas1_idx) {
        if (y1[i] == 1.0) zero_events = false;
    }
    if (zero_events) part.flags.push_back("zero_followup_events");

    Fluctuation fluct1 = fluctuate(y1(meas1_idx), q1_all(meas1_idx), h1);
    if (!fluct1.performed) {
        part.flags.push_back("degenerate_followup_outcome");
    } else {
        part.max_score_residual = std::max(part.max_score_residual, fluct1.score);
        if (!fluct1.converged) part.flags.push_back("followup_fluctuation_not_converged");
    }
    Eigen::VectorXd q1_targeted = apply_fluctuation(q1_all, fluct1.epsilon);

    // pseudo-outcomes for members with measured baseline: deterministic zero
    // for observed baseline-positives, targeted prediction otherwise
    Eigen::VectorXd z(static_cast<Eigen::Index>(meas0_idx.size()));
    for (std::size_t k = 0; k < meas0_idx.size(); ++k) {
        const Eigen::Index i = meas0_idx[k];
        const auto& r = unit.records[static_cast<std::size_t>(i)];
        z[static_cast<Eigen::Index>(k)] = r.outcome_baseline == 1 ? 0.0 : q1_targeted[i];
    }

    NamedMatrix x_meas0{x0.values(meas0_idx, Eigen::all), x0.names};
    Eigen::VectorXd q0_all = ensemble_regression(x_meas0, z, x0, options.adjustment,
                                                 options, "stage1/num/rollup");

    Eigen::VectorXd h0(static_cast<Eigen::Index>(meas0_idx.size()));
    for (std::size_t k = 0; k < meas0_idx.size(); ++k) h0[static_cast<Eigen::Index>(k)] = 1.0 / g0.bounded[meas0_idx[k]];

    Fluctuation fluct0 = fluctuate(z, q0_all(meas0_idx), h0);
    if (!fluct0.performed) {
        part.flags.push_back("degenerate_rollup");
    } else {
        part.max_score_residual = std::max(part.max_score_residual, fluct0.score);
        if (!fluct0.converged) part.flags.push_back("rollup_fluctuation_not_converged");
    }
    Eigen::VectorXd q0_targeted = apply_fluctuation(q0_all, fluct0.epsilon);
    part.estimate = q0_targeted.mean();
    return part;
}

double tmle_numerator(const UnitData& unit, const Stage1Options& options) {
    return tmle_numerator_detail(unit, options).estimate;
}

namespace {

EndpointEstimate unadjusted_endpoint(const UnitData& unit, EndpointEstimate estimate) {
    double y0_sum = 0.0, y1_sum = 0.0;
    int n_meas0 = 0, n_meas1 = 0;
    for (const auto& r : unit.records) {
        if (r.sampled == 1 && r.measured_baseline == 1) {
            ++n_meas0;
            y0_sum += r.outcome_baseline;
        }
        if (r.measured_baseline == 1 && r.outcome_baseline == 0 && r.measured_followup == 1) {
            ++n_meas1;
            y1_sum += r.outcome_followup;
        }
    }
    if (n_meas0 == 0) {
        throw EstimationError("unit " + unit.unit_id + ": no baseline outcome measurements");
    }
    if (n_meas1 == 0) {
        throw EstimationError("unit " + unit.unit_id + ": no cohort member measured at follow-up");
    }
    estimate.adjusted = false;
    estimate.psi_den_hat = y0_sum / n_meas0;
    estimate.endpoint = y1_sum / n_meas1;
    estimate.psi_num_hat = estimate.endpoint * (1.0 - estimate.psi_den_hat);
    return estimate;
}

}  // namespace

EndpointEstimate estimate_endpoint(const UnitData& unit, const AnalysisConfig& config) {
    validate_config(config);
    EndpointEstimate estimate;
    estimate.unit_id = unit.unit_id;
    estimate.n_individuals = static_cast<int>(unit.records.size());
    for (const auto& r : unit.records) {
        estimate.n_sampled += r.sampled;
        estimate.n_measured_baseline += r.sampled == 1 && r.measured_baseline == 1;
        const bool in_cohort = r.measured_baseline == 1 && r.outcome_baseline == 0;
        estimate.n_cohort += in_cohort;
        estimate.n_measured_followup += in_cohort && r.measured_followup == 1;
    }
    if (estimate.n_individuals == 0) {
        throw EstimationError("unit " + unit.unit_id + " has no members");
    }

    if (config.stage1_unadjusted) return unadjusted_endpoint(unit, std::move(estimate));

    const Stage1Options options = stage1_options(config);
    Stage1Part den = tmle_denominator_detail(unit, options);
    Stage1Part num = tmle_numerator_detail(unit, options);
    estimate.psi_den_hat = den.estimate;
    estimate.psi_num_hat = num.estimate;
    if (1.0 - estimate.psi_den_hat < 1e-9) {
        throw EstimationError("unit " + unit.unit_id +
                              ": everyone is estimated baseline-positive, endpoint undefined");
    }
    estimate.endpoint = estimate.psi_num_hat / (1.0 - estimate.psi_den_hat);
    estimate.min_measurement_prob = std::min(den.min_mechanism_prob, num.min_mechanism_prob);
    estimate.n_gbound_activations = den.n_gbound_activations + num.n_gbound_activations;
    estimate.max_score_residual = std::max(den.max_score_residual, num.max_score_residual);
    estimate.flags = den.flags;
    estimate.flags.insert(estimate.flags.end(), num.flags.begin(), num.flags.end());
    if (estimate.psi_num_hat > 1.0 - estimate.psi_den_hat + 0.05) {
        estimate.flags.push_back("joint_share_exceeds_cohort_share");
    }
    return estimate;
}

}  // namespace crtmle
